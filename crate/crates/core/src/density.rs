//! Feature-space densities on a bounded integer age lattice crossed with a
//! categorical risk level.
//!
//! The kernel estimator is a discrete Gaussian associate kernel: for a target
//! age `j` the kernel is the pmf `K_{j,h}(x) ∝ exp(−(x−j)²/(2h²))` normalized
//! over the age support, and the estimate at `j` averages it over the sample.
//! Risk levels are handled by empirical stratum proportions; smoothing acts on
//! age within a stratum only.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    High,
    Medium,
    Low,
    None,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 4] = [RiskLevel::High, RiskLevel::Medium, RiskLevel::Low, RiskLevel::None];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::High => "high",
            RiskLevel::Medium => "medium",
            RiskLevel::Low => "low",
            RiskLevel::None => "none",
        }
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "high" => Ok(RiskLevel::High),
            "medium" => Ok(RiskLevel::Medium),
            "low" => Ok(RiskLevel::Low),
            "none" | "" => Ok(RiskLevel::None),
            other => Err(format!("unknown risk level {other:?}")),
        }
    }
}

/// One individual's covariates. Ordered by risk level, then age.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub risk_level: RiskLevel,
    pub age: u32,
}

impl FeaturePoint {
    pub fn new(risk_level: RiskLevel, age: u32) -> Self {
        FeaturePoint { risk_level, age }
    }

    pub fn age_only(age: u32) -> Self {
        FeaturePoint { risk_level: RiskLevel::None, age }
    }
}

impl fmt::Display for FeaturePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(risk_level={}, age={})", self.risk_level, self.age)
    }
}

/// Inclusive integer age range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeSupport {
    pub min: u32,
    pub max: u32,
}

impl Default for AgeSupport {
    fn default() -> Self {
        AgeSupport { min: 11, max: 80 }
    }
}

impl AgeSupport {
    pub fn new(min: u32, max: u32) -> Result<Self> {
        if min > max {
            return Err(Error::InvalidParameter(format!("age support [{min}, {max}] is empty")));
        }
        Ok(AgeSupport { min, max })
    }

    pub fn contains(&self, age: u32) -> bool {
        (self.min..=self.max).contains(&age)
    }

    pub fn ages(&self) -> impl Iterator<Item = u32> + Clone {
        self.min..=self.max
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Serialized as the string `"auto"` or a number of years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandwidthRepr", into = "BandwidthRepr")]
pub enum Bandwidth {
    Fixed(f64),
    /// Least-squares cross-validation over a log-spaced grid on [0.5, 10].
    Auto,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BandwidthRepr {
    Years(f64),
    Text(String),
}

impl TryFrom<BandwidthRepr> for Bandwidth {
    type Error = String;

    fn try_from(repr: BandwidthRepr) -> std::result::Result<Self, Self::Error> {
        match repr {
            BandwidthRepr::Years(h) => Ok(Bandwidth::Fixed(h)),
            BandwidthRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Bandwidth> for BandwidthRepr {
    fn from(b: Bandwidth) -> Self {
        match b {
            Bandwidth::Fixed(h) => BandwidthRepr::Years(h),
            Bandwidth::Auto => BandwidthRepr::Text("auto".into()),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Bandwidth::Auto);
        }
        s.parse::<f64>()
            .map(Bandwidth::Fixed)
            .map_err(|_| format!("bandwidth must be `auto` or a positive number, got {s:?}"))
    }
}

/// A probability mass function on a finite set of feature points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    support: Vec<FeaturePoint>,
    weights: Vec<f64>,
    /// Kernel bandwidth in years; `None` for tabulated estimates.
    bandwidth: Option<f64>,
}

impl DensityEstimate {
    fn from_sorted(support: Vec<FeaturePoint>, weights: Vec<f64>, bandwidth: Option<f64>) -> Self {
        debug_assert!(support.windows(2).all(|w| w[0] < w[1]));
        DensityEstimate { support, weights, bandwidth }
    }

    pub fn support(&self) -> &[FeaturePoint] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.bandwidth
    }

    pub fn iter(&self) -> impl Iterator<Item = (FeaturePoint, f64)> + '_ {
        self.support.iter().copied().zip(self.weights.iter().copied())
    }

    /// Mass at `x`, zero off the support.
    pub fn weight(&self, x: &FeaturePoint) -> f64 {
        self.support.binary_search(x).map(|i| self.weights[i]).unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        crate::numeric::compensated_sum(self.weights.iter().copied())
    }

    pub fn mean_age(&self) -> f64 {
        self.iter().map(|(x, w)| x.age as f64 * w).sum()
    }

    /// Mass aggregated per risk level.
    pub fn level_shares(&self) -> BTreeMap<RiskLevel, f64> {
        let mut shares = BTreeMap::new();
        for (x, w) in self.iter() {
            *shares.entry(x.risk_level).or_insert(0.0) += w;
        }
        shares
    }

    /// Total-variation distance to the uniform law on the same support.
    pub fn tv_to_uniform(&self) -> f64 {
        let u = 1.0 / self.support.len() as f64;
        0.5 * self.weights.iter().map(|w| (w - u).abs()).sum::<f64>()
    }

    /// Replaces the per-level proportions by `shares`, keeping each level's
    /// conditional age distribution. Levels missing from `shares` are dropped;
    /// levels in `shares` but absent here are an error.
    pub fn with_level_shares(&self, shares: &BTreeMap<RiskLevel, f64>) -> Result<DensityEstimate> {
        let current = self.level_shares();
        let total: f64 = shares.values().sum();
        if shares.values().any(|s| *s < 0.0 || !s.is_finite()) || !(total > 0.0) {
            return Err(Error::InvalidParameter("level shares must be nonnegative with positive total".into()));
        }
        for level in shares.keys() {
            if !current.contains_key(level) {
                return Err(Error::InvalidParameter(format!("no age distribution available for risk level {level}")));
            }
        }
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for (x, w) in self.iter() {
            if let Some(share) = shares.get(&x.risk_level) {
                let within = current[&x.risk_level];
                support.push(x);
                weights.push(if within > 0.0 { w / within * share / total } else { 0.0 });
            }
        }
        Ok(DensityEstimate::from_sorted(support, weights, self.bandwidth))
    }

    /// Product law: `shares[level] × age density`, where `self` is an age-only
    /// density (risk level `none`).
    pub fn crossed_with_levels(&self, shares: &BTreeMap<RiskLevel, f64>) -> Result<DensityEstimate> {
        let total: f64 = shares.values().sum();
        if shares.values().any(|s| *s < 0.0 || !s.is_finite()) || !(total > 0.0) {
            return Err(Error::InvalidParameter("level shares must be nonnegative with positive total".into()));
        }
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for (&level, &share) in shares {
            for (x, w) in self.iter() {
                support.push(FeaturePoint::new(level, x.age));
                weights.push(w * share / total);
            }
        }
        Ok(DensityEstimate::from_sorted(support, weights, self.bandwidth))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["risk_level", "age", "weight"])?;
        for (x, w) in self.iter() {
            wtr.write_record([x.risk_level.as_str(), &x.age.to_string(), &format!("{w:.17e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<DensityEstimate> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut table = BTreeMap::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let line = i + 2;
            if row.len() != 3 {
                return Err(Error::schema(line, "expected columns risk_level,age,weight"));
            }
            let level: RiskLevel = row[0].parse().map_err(|e: String| Error::schema(line, e))?;
            let age: u32 = row[1].trim().parse().map_err(|_| Error::schema(line, format!("bad age {:?}", &row[1])))?;
            let w: f64 = row[2].trim().parse().map_err(|_| Error::schema(line, format!("bad weight {:?}", &row[2])))?;
            table.insert(FeaturePoint::new(level, age), w);
        }
        tabulated_density(&table)
    }
}

fn kernel_row(target: u32, ages: AgeSupport, h: f64) -> Vec<f64> {
    let mut row: Vec<f64> = ages
        .ages()
        .map(|x| {
            let d = x as f64 - target as f64;
            (-(d * d) / (2.0 * h * h)).exp()
        })
        .collect();
    let norm: f64 = row.iter().sum();
    for v in &mut row {
        *v /= norm;
    }
    row
}

/// Associate-kernel matrix: row `j` is the kernel pmf targeted at age `j`.
fn kernel_matrix(ages: AgeSupport, h: f64) -> Vec<Vec<f64>> {
    ages.ages().map(|j| kernel_row(j, ages, h)).collect()
}

/// Per-level age counts, indexed by offset from `ages.min`.
fn stratum_counts(sample: &[FeaturePoint], ages: AgeSupport) -> Result<BTreeMap<RiskLevel, Vec<f64>>> {
    let mut strata: BTreeMap<RiskLevel, Vec<f64>> = BTreeMap::new();
    for x in sample {
        if !ages.contains(x.age) {
            return Err(Error::InvalidParameter(format!(
                "sample point {x} lies outside the age support [{}, {}]",
                ages.min, ages.max
            )));
        }
        strata.entry(x.risk_level).or_insert_with(|| vec![0.0; ages.len()])[(x.age - ages.min) as usize] += 1.0;
    }
    Ok(strata)
}

/// Unnormalized smoothed weights for every level.
fn smooth(strata: &BTreeMap<RiskLevel, Vec<f64>>, kernel: &[Vec<f64>]) -> BTreeMap<RiskLevel, Vec<f64>> {
    strata
        .iter()
        .map(|(&level, counts)| {
            let smoothed = kernel
                .iter()
                .map(|row| row.iter().zip(counts).map(|(k, c)| k * c).sum::<f64>())
                .collect();
            (level, smoothed)
        })
        .collect()
}

fn lscv_score(strata: &BTreeMap<RiskLevel, Vec<f64>>, n: f64, ages: AgeSupport, h: f64) -> f64 {
    let kernel = kernel_matrix(ages, h);
    let smoothed = smooth(strata, &kernel);
    let mut integral_sq = 0.0;
    let mut loo = 0.0;
    for (level, counts) in strata {
        let s = &smoothed[level];
        let level_n: f64 = counts.iter().sum();
        let level_mass: f64 = s.iter().sum();
        // f(l, j) = (n_l / n) * s_j / Σ s
        let scale = level_n / n / level_mass;
        integral_sq += s.iter().map(|v| (v * scale).powi(2)).sum::<f64>();
        for (j, &c) in counts.iter().enumerate() {
            if c > 0.0 {
                let without_self = (s[j] - kernel[j][j]) * scale * n / (n - 1.0);
                loo += c * without_self;
            }
        }
    }
    integral_sq - 2.0 * loo / n
}

/// Bandwidth grid searched by [`Bandwidth::Auto`].
pub fn lscv_grid() -> Vec<f64> {
    const POINTS: usize = 40;
    let (lo, hi) = (0.5f64.ln(), 10f64.ln());
    (0..POINTS).map(|i| (lo + (hi - lo) * i as f64 / (POINTS - 1) as f64).exp()).collect()
}

/// Least-squares cross-validated bandwidth; ties go to the smaller value.
pub fn select_bandwidth(sample: &[FeaturePoint], ages: AgeSupport) -> Result<f64> {
    if sample.len() < 2 {
        return Err(Error::InsufficientData("bandwidth selection needs at least two points".into()));
    }
    let strata = stratum_counts(sample, ages)?;
    let n = sample.len() as f64;
    let mut best: Option<(f64, f64)> = None;
    for h in lscv_grid() {
        let score = lscv_score(&strata, n, ages, h);
        match best {
            Some((s, _)) if score >= s - 1e-14 * s.abs() => {}
            _ => best = Some((score, h)),
        }
    }
    Ok(best.expect("grid is nonempty").1)
}

/// Kernel density over `levels present in sample × ages`.
pub fn fit_kernel_density(sample: &[FeaturePoint], bandwidth: Bandwidth, ages: AgeSupport) -> Result<DensityEstimate> {
    if sample.is_empty() {
        return Err(Error::Empty("kernel density sample"));
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::Auto if sample.len() == 1 => lscv_grid()[0],
        Bandwidth::Auto => select_bandwidth(sample, ages)?,
    };
    let strata = stratum_counts(sample, ages)?;
    let smoothed = smooth(&strata, &kernel_matrix(ages, h));
    let n = sample.len() as f64;

    let mut support = Vec::with_capacity(strata.len() * ages.len());
    let mut weights = Vec::with_capacity(strata.len() * ages.len());
    for (level, counts) in &strata {
        let s = &smoothed[level];
        let level_share = counts.iter().sum::<f64>() / n;
        let mass: f64 = s.iter().sum();
        for (age, v) in ages.ages().zip(s) {
            support.push(FeaturePoint::new(*level, age));
            weights.push(level_share * v / mass);
        }
    }
    let total = crate::numeric::compensated_sum(weights.iter().copied());
    for w in &mut weights {
        *w /= total;
    }
    Ok(DensityEstimate::from_sorted(support, weights, Some(h)))
}

/// Exact tabulated density; renormalizes (with a warning) when the weights
/// do not already sum to one.
pub fn tabulated_density(weights: &BTreeMap<FeaturePoint, f64>) -> Result<DensityEstimate> {
    if weights.is_empty() {
        return Err(Error::Empty("tabulated density"));
    }
    if let Some((x, w)) = weights.iter().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidParameter(format!("weight at {x} must be nonnegative and finite, got {w}")));
    }
    let total = crate::numeric::compensated_sum(weights.values().copied());
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("tabulated weights sum to zero".into()));
    }
    if (total - 1.0).abs() > 1e-9 {
        log::warn!("tabulated weights sum to {total}; renormalizing");
    }
    let support = weights.keys().copied().collect();
    let w = weights.values().map(|v| v / total).collect();
    Ok(DensityEstimate::from_sorted(support, w, None))
}

/// `f1(x) / f0(x)`.
pub fn density_ratio_features(f1: &DensityEstimate, f0: &DensityEstimate, x: &FeaturePoint) -> Result<f64> {
    let denom = f0.weight(x);
    if !(denom > 0.0) {
        return Err(Error::ZeroDensity(*x));
    }
    Ok(f1.weight(x) / denom)
}
