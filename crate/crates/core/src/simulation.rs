//! Simulation study: four generative scenarios, the estimate-then-solve
//! pipeline on each simulated dataset, and Monte-Carlo summaries.
//!
//! Replication `k` draws from `ChaCha8Rng::seed_from_u64(base_seed + k)`
//! (wrapping), so any replication can be rerun on its own.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    average_quarantine_duration, conditional_quantile_rule, expected_escape, sample_quantile,
    unconditional_quantile_rule,
};
use crate::density::{fit_kernel_density, tabulated_density, AgeSupport, Bandwidth, DensityEstimate, FeaturePoint};
use crate::distributions::{
    ContinuousLaw, LognormalParams, MixtureParams, TruncNormalParams, WeibullParams, DEFAULT_Y_MAX,
};
use crate::error::{Error, Result};
use crate::incubation::{fit_incubation_model, FitOptions, FitReport, Likelihood, Observation};
use crate::numeric::round_half_up;
use crate::rule_solver::{
    optimal_rule, rule_from_curves, ConditionalLaw, InfectedMass, QuarantineRule, RatioCurves, ThresholdSolution,
};

pub const METHODS: [&str; 3] = ["quantile", "conditional_quantile", "optimal"];

/// Integer ages on which simulated rules are defined and evaluated.
pub const SIMULATION_AGES: AgeSupport = AgeSupport { min: 10, max: 80 };

/// One of the four generative settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u8,
    pub infection_prob: f64,
    pub infected_ages: TruncNormalParams,
    pub uninfected_ages: TruncNormalParams,
}

impl ScenarioSpec {
    pub fn new(id: u8) -> Result<Self> {
        if !(1..=4).contains(&id) {
            return Err(Error::InvalidParameter(format!("scenario must be 1, 2, 3 or 4, got {id}")));
        }
        Ok(ScenarioSpec {
            id,
            infection_prob: 0.05,
            infected_ages: TruncNormalParams::new(55.0, 625.0, 10.0, 80.0)?,
            uninfected_ages: TruncNormalParams::new(25.0, 400.0, 10.0, 80.0)?,
        })
    }

    pub fn truth(&self) -> TrueIncubation {
        TrueIncubation { scenario: self.id }
    }

    /// Feature law restricted to the integer age grid.
    fn age_grid_density(law: &TruncNormalParams) -> Result<DensityEstimate> {
        let table: BTreeMap<_, _> = SIMULATION_AGES
            .ages()
            .map(|a| (FeaturePoint::age_only(a), law.pdf(a as f64)))
            .collect();
        let total: f64 = table.values().sum();
        tabulated_density(&table.into_iter().map(|(x, w)| (x, w / total)).collect())
    }

    pub fn infected_grid_density(&self) -> Result<DensityEstimate> {
        Self::age_grid_density(&self.infected_ages)
    }

    pub fn uninfected_grid_density(&self) -> Result<DensityEstimate> {
        Self::age_grid_density(&self.uninfected_ages)
    }
}

/// The generating incubation law of a scenario, at a given age.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IncubationLaw {
    Weibull(WeibullParams),
    Lognormal(LognormalParams),
    Mixture(MixtureParams),
}

impl ContinuousLaw for IncubationLaw {
    fn pdf(&self, y: f64) -> f64 {
        match self {
            IncubationLaw::Weibull(l) => l.pdf(y),
            IncubationLaw::Lognormal(l) => l.pdf(y),
            IncubationLaw::Mixture(l) => l.pdf(y),
        }
    }

    fn cdf(&self, y: f64) -> f64 {
        match self {
            IncubationLaw::Weibull(l) => l.cdf(y),
            IncubationLaw::Lognormal(l) => l.cdf(y),
            IncubationLaw::Mixture(l) => l.cdf(y),
        }
    }

    fn sf(&self, y: f64) -> f64 {
        match self {
            IncubationLaw::Weibull(l) => l.sf(y),
            IncubationLaw::Lognormal(l) => l.sf(y),
            IncubationLaw::Mixture(l) => l.sf(y),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            IncubationLaw::Weibull(l) => l.sample(rng),
            IncubationLaw::Lognormal(l) => l.sample(rng),
            IncubationLaw::Mixture(l) => l.sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrueIncubation {
    scenario: u8,
}

impl TrueIncubation {
    pub fn at(&self, age: f64) -> IncubationLaw {
        let quad = |centre: f64, coef: f64| coef * (age - centre) * (age - centre);
        match self.scenario {
            1 => IncubationLaw::Weibull(WeibullParams { shape: 1.5, scale: 4.5 + quad(30.0, 0.0025) }),
            2 => IncubationLaw::Weibull(WeibullParams { shape: 1.5, scale: 3.0 + age.ln() }),
            3 => IncubationLaw::Lognormal(LognormalParams { log_mean: 1.5, log_sd: 0.6 + quad(35.0, 0.0002) }),
            _ => IncubationLaw::Mixture(MixtureParams {
                weight: 0.5,
                component_a: WeibullParams { shape: 1.5, scale: 4.5 + quad(30.0, 0.0025) },
                component_b: WeibullParams { shape: 4.0, scale: 10.0 },
            }),
        }
    }
}

impl ConditionalLaw for TrueIncubation {
    fn pdf(&self, x: &FeaturePoint, y: f64) -> f64 {
        self.at(x.age as f64).pdf(y)
    }

    fn cdf(&self, x: &FeaturePoint, y: f64) -> f64 {
        self.at(x.age as f64).cdf(y)
    }

    fn sf(&self, x: &FeaturePoint, y: f64) -> f64 {
        self.at(x.age as f64).sf(y)
    }
}

/// A simulated individual: continuous age, infection status and, for the
/// infected, the exact incubation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRecord {
    pub age: f64,
    pub infected: bool,
    pub incubation: Option<f64>,
}

impl SimulatedRecord {
    /// Age rounded to whole years.
    pub fn age_years(&self) -> u32 {
        round_half_up(self.age) as u32
    }
}

pub fn generate_dataset(spec: &ScenarioSpec, n: usize, seed: u64) -> Result<Vec<SimulatedRecord>> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be positive".into()));
    }
    let truth = spec.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let infected = rng.random::<f64>() < spec.infection_prob;
            if infected {
                let age = spec.infected_ages.sample(&mut rng);
                let y = truth.at(age).sample(&mut rng);
                SimulatedRecord { age, infected, incubation: Some(y) }
            } else {
                SimulatedRecord { age: spec.uninfected_ages.sample(&mut rng), infected, incubation: None }
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub likelihood: Likelihood,
    pub bandwidth: Bandwidth,
    pub y_max: f64,
    pub round: bool,
    pub quantile_level: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            likelihood: Likelihood::Ceiled,
            bandwidth: Bandwidth::Auto,
            y_max: DEFAULT_Y_MAX,
            round: true,
            quantile_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub aqd: f64,
    pub ep: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub seed: u64,
    pub n_infected: usize,
    /// Keyed by method label.
    pub methods: BTreeMap<String, MethodResult>,
    pub rules: BTreeMap<String, QuarantineRule>,
    pub fit: FitReport,
    pub solution: ThresholdSolution,
}

/// Evaluates a rule on the true laws: AQD under the uninfected age grid law
/// and escape under the true conditional incubation law.
pub fn evaluate_on_truth(spec: &ScenarioSpec, rule: &QuarantineRule, round: bool) -> Result<MethodResult> {
    let p0 = spec.uninfected_grid_density()?;
    let p1 = spec.infected_grid_density()?;
    Ok(MethodResult {
        aqd: average_quarantine_duration(rule, &p0, round)?,
        ep: expected_escape(rule, &spec.truth(), &p1, round)?,
    })
}

/// Fits densities and the Weibull working model, solves the three rules and
/// evaluates each against the truth.
pub fn run_pipeline(spec: &ScenarioSpec, n: usize, epsilon: f64, seed: u64, options: &PipelineOptions) -> Result<ReplicationResult> {
    let records = generate_dataset(spec, n, seed)?;
    let (infected, uninfected): (Vec<&SimulatedRecord>, Vec<&SimulatedRecord>) = records.iter().partition(|r| r.infected);
    let infected_points: Vec<FeaturePoint> = infected.iter().map(|r| FeaturePoint::age_only(r.age_years())).collect();
    let uninfected_points: Vec<FeaturePoint> = uninfected.iter().map(|r| FeaturePoint::age_only(r.age_years())).collect();
    let f1 = fit_kernel_density(&infected_points, options.bandwidth, SIMULATION_AGES)?;
    let f0 = fit_kernel_density(&uninfected_points, options.bandwidth, SIMULATION_AGES)?;

    let incubation: Vec<f64> = infected.iter().map(|r| r.incubation.expect("infected records carry Y")).collect();
    let observations: Vec<Observation> = infected
        .iter()
        .zip(&incubation)
        .map(|(r, &y)| {
            let value = match options.likelihood {
                Likelihood::Ceiled => y.ceil().max(1.0),
                Likelihood::Continuous => y,
            };
            Observation::new(r.age_years() as f64, value)
        })
        .collect();
    let fit = fit_incubation_model(
        &observations,
        &FitOptions { likelihood: options.likelihood, age_support: SIMULATION_AGES, ..FitOptions::default() },
    )?;

    let support = f0.support().to_vec();
    let p = options.quantile_level;
    let quantile = unconditional_quantile_rule(&incubation, p, &support)?;
    let conditional = conditional_quantile_rule(&fit.model, p, &support)?;
    let (optimal, solution) = optimal_rule(epsilon, &f1, &f0, &fit.model, &infected_points, None, options.y_max)?;

    let mut methods = BTreeMap::new();
    let mut rules = BTreeMap::new();
    for (label, rule) in METHODS.iter().zip([quantile, conditional, optimal]) {
        methods.insert(label.to_string(), evaluate_on_truth(spec, &rule, options.round)?);
        rules.insert(label.to_string(), rule);
    }
    Ok(ReplicationResult { seed, n_infected: infected.len(), methods, rules, fit, solution })
}

/// Rule computed from the true laws rather than estimates.
pub fn theoretical_optimum(spec: &ScenarioSpec, epsilon: f64, y_max: f64) -> Result<(QuarantineRule, ThresholdSolution)> {
    let truth = spec.truth();
    let p1 = spec.infected_grid_density()?;
    let p0 = spec.uninfected_grid_density()?;
    let curves = RatioCurves::build(&truth, &p1, &p0, None, y_max)?;
    let mass = InfectedMass::from_weights(&curves, &p1)?;
    rule_from_curves(epsilon, &curves, &mass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: u8,
    pub method: String,
    pub aqd: f64,
    pub aqd_se: f64,
    pub ep: f64,
    pub ep_se: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub scenario: u8,
    pub rows: Vec<SummaryRow>,
    pub replications: Vec<ReplicationResult>,
    /// `(seed, message)` for replications whose fit or solve failed.
    pub failures: Vec<(u64, String)>,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn replication_seed(base_seed: u64, k: usize) -> u64 {
    base_seed.wrapping_add(k as u64)
}

/// Runs `reps` independent replications in parallel and averages each
/// method's AQD and EP over the successful ones.
pub fn run_replications(
    spec: &ScenarioSpec,
    n: usize,
    epsilon: f64,
    reps: usize,
    base_seed: u64,
    options: &PipelineOptions,
) -> Result<SimulationSummary> {
    if reps == 0 {
        return Err(Error::InvalidParameter("at least one replication is required".into()));
    }
    let outcomes: Vec<(u64, Result<ReplicationResult>)> = (0..reps)
        .into_par_iter()
        .map(|k| {
            let seed = replication_seed(base_seed, k);
            (seed, run_pipeline(spec, n, epsilon, seed, options))
        })
        .collect();
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(r) => replications.push(r),
            Err(e) => {
                log::warn!("replication with seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if replications.is_empty() {
        return Err(Error::InsufficientData(format!("all {reps} replications failed")));
    }
    let rows = METHODS
        .iter()
        .map(|m| {
            let aqd: Vec<f64> = replications.iter().map(|r| r.methods[*m].aqd).collect();
            let ep: Vec<f64> = replications.iter().map(|r| r.methods[*m].ep).collect();
            let (aqd, aqd_se) = mean_and_se(&aqd);
            let (ep, ep_se) = mean_and_se(&ep);
            SummaryRow { scenario: spec.id, method: m.to_string(), aqd, aqd_se, ep, ep_se, replications: replications.len() }
        })
        .collect();
    Ok(SimulationSummary { scenario: spec.id, rows, replications, failures })
}

impl SimulationSummary {
    /// Mean duration per age and method across replications (unrounded).
    pub fn mean_durations(&self) -> BTreeMap<String, BTreeMap<FeaturePoint, f64>> {
        let n = self.replications.len() as f64;
        let mut out: BTreeMap<String, BTreeMap<FeaturePoint, f64>> = BTreeMap::new();
        for r in &self.replications {
            for (method, rule) in &r.rules {
                let entry = out.entry(method.clone()).or_default();
                for (x, d) in &rule.durations {
                    *entry.entry(*x).or_insert(0.0) += d / n;
                }
            }
        }
        out
    }

    pub fn write_table_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// One row per age: mean duration of each method, plus the truth-based
    /// optimum when given.
    pub fn write_durations_csv<W: Write>(&self, theoretical: Option<&QuarantineRule>, writer: W) -> Result<()> {
        let means = self.mean_durations();
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["age".to_string()];
        header.extend(METHODS.iter().map(|m| m.to_string()));
        if theoretical.is_some() {
            header.push("theoretical_optimal".into());
        }
        wtr.write_record(&header)?;
        for age in SIMULATION_AGES.ages() {
            let x = FeaturePoint::age_only(age);
            let mut row = vec![age.to_string()];
            for m in METHODS {
                row.push(format!("{}", means.get(m).and_then(|d| d.get(&x)).copied().unwrap_or(f64::NAN)));
            }
            if let Some(rule) = theoretical {
                row.push(format!("{}", rule.duration(&x)?));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Sample 0.95-quantile of the continuous incubation times in a dataset.
pub fn incubation_quantile(records: &[SimulatedRecord], p: f64) -> Result<f64> {
    let ys: Vec<f64> = records.iter().filter_map(|r| r.incubation).collect();
    sample_quantile(&ys, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infected_fraction_is_binomial() {
        let spec = ScenarioSpec::new(1).unwrap();
        let n = 10_000;
        let data = generate_dataset(&spec, n, 42).unwrap();
        let frac = data.iter().filter(|r| r.infected).count() as f64 / n as f64;
        assert!((frac - 0.05).abs() < 3.0 * (0.05f64 * 0.95 / n as f64).sqrt());
        assert!(data.iter().all(|r| r.infected == r.incubation.is_some()));
        assert!(data.iter().all(|r| (10.0..=80.0).contains(&r.age)));
    }

    #[test]
    fn invalid_scenario() {
        assert!(ScenarioSpec::new(0).is_err());
        assert!(ScenarioSpec::new(5).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = ScenarioSpec::new(3).unwrap();
        assert_eq!(generate_dataset(&spec, 500, 7).unwrap(), generate_dataset(&spec, 500, 7).unwrap());
        assert_ne!(generate_dataset(&spec, 500, 7).unwrap(), generate_dataset(&spec, 500, 8).unwrap());
    }

    #[test]
    fn grid_densities_normalize() {
        let spec = ScenarioSpec::new(1).unwrap();
        for d in [spec.infected_grid_density().unwrap(), spec.uninfected_grid_density().unwrap()] {
            assert!((d.total_mass() - 1.0).abs() < 1e-12);
            assert_eq!(d.support().len(), 71);
        }
    }

    #[test]
    fn truth_laws_match_definitions() {
        let t = ScenarioSpec::new(2).unwrap().truth();
        let IncubationLaw::Weibull(w) = t.at(40.0) else { panic!() };
        assert!((w.scale - (3.0 + 40f64.ln())).abs() < 1e-15);
        let t = ScenarioSpec::new(3).unwrap().truth();
        let IncubationLaw::Lognormal(l) = t.at(45.0) else { panic!() };
        assert!((l.log_sd - 0.62).abs() < 1e-15);
        let t = ScenarioSpec::new(4).unwrap().truth();
        let IncubationLaw::Mixture(m) = t.at(30.0) else { panic!() };
        assert_eq!(m.component_a.scale, 4.5);
        assert_eq!(m.component_b.scale, 10.0);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let spec = ScenarioSpec::new(1).unwrap();
        let opts = PipelineOptions::default();
        let a = run_pipeline(&spec, 4000, 0.05, 3, &opts).unwrap();
        let b = run_pipeline(&spec, 4000, 0.05, 3, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.methods.len(), 3);
    }

    #[test]
    fn single_replication_equals_pipeline() {
        let spec = ScenarioSpec::new(1).unwrap();
        let opts = PipelineOptions::default();
        let single = run_pipeline(&spec, 4000, 0.05, 11, &opts).unwrap();
        let summary = run_replications(&spec, 4000, 0.05, 1, 11, &opts).unwrap();
        assert_eq!(summary.replications[0], single);
        for row in &summary.rows {
            assert_eq!(row.aqd, single.methods[&row.method].aqd);
            assert_eq!(row.ep, single.methods[&row.method].ep);
        }
    }

    #[test]
    fn theoretical_rule_meets_target() {
        let spec = ScenarioSpec::new(1).unwrap();
        let (rule, sol) = theoretical_optimum(&spec, 0.05, DEFAULT_Y_MAX).unwrap();
        assert!(!sol.fallback_used);
        assert!((sol.achieved_escape - 0.05).abs() < 1e-6);
        let eval = evaluate_on_truth(&spec, &rule, false).unwrap();
        assert!((eval.ep - 0.05).abs() < 1e-6);
    }
}
