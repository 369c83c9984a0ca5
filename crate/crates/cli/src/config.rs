use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quarantine_core::distributions::DEFAULT_Y_MAX;
use quarantine_core::{AgeSupport, Bandwidth};
use serde::Deserialize;

/// Fields accepted in the `--config` JSON file. Command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub age_min: Option<u32>,
    pub age_max: Option<u32>,
    pub y_max: Option<f64>,
    pub epsilon: Option<f64>,
    pub bandwidth: Option<Bandwidth>,
    pub round: Option<bool>,
    pub seed: Option<u64>,
    pub max_violation_fraction: Option<f64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags that may override the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub y_max: Option<f64>,
    pub round: Option<bool>,
    pub bandwidth: Option<Bandwidth>,
    pub age_min: Option<u32>,
    pub age_max: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub age_support: AgeSupport,
    pub y_max: f64,
    pub epsilon: f64,
    pub bandwidth: Bandwidth,
    pub round: bool,
    pub seed: u64,
    pub max_violation_fraction: f64,
    pub out_dir: PathBuf,
}

pub const DEFAULT_SEED: u64 = 20_200_514;

impl Settings {
    pub fn resolve(config: Option<&Path>, flags: &Overrides, out_dir: PathBuf) -> Result<Self> {
        let file = match config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let age_min = flags.age_min.or(file.age_min).unwrap_or(11);
        let age_max = flags.age_max.or(file.age_max).unwrap_or(80);
        let settings = Settings {
            age_support: AgeSupport::new(age_min, age_max)?,
            y_max: flags.y_max.or(file.y_max).unwrap_or(DEFAULT_Y_MAX),
            epsilon: flags.epsilon.or(file.epsilon).unwrap_or(0.05),
            bandwidth: flags.bandwidth.or(file.bandwidth).unwrap_or(Bandwidth::Auto),
            round: flags.round.or(file.round).unwrap_or(true),
            seed: flags.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            max_violation_fraction: file.max_violation_fraction.unwrap_or(0.25),
            out_dir,
        };
        if !(settings.epsilon > 0.0 && settings.epsilon < 1.0) {
            bail!("epsilon must lie in (0, 1), got {}", settings.epsilon);
        }
        if !(settings.y_max > 0.0 && settings.y_max.is_finite()) {
            bail!("y_max must be positive, got {}", settings.y_max);
        }
        Ok(settings)
    }
}
