//! Superlevel-set quarantine durations and the threshold that meets a target
//! escape probability.
//!
//! For each feature point `x` the ratio curve is
//! `y ↦ f1(y|x)·f1(x)/f0(x)`; the duration at threshold `c` is the right end
//! of `{y : curve(y) ≥ c}`. The optimal rule uses the largest `c` whose
//! escape probability does not exceed the target.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensityEstimate, FeaturePoint};
use crate::distributions::{ContinuousLaw, WeibullParams};
use crate::error::{Error, Result};
use crate::incubation::ConditionalIncubationModel;
use crate::numeric::{bisect_boundary, compensated_sum, golden_section_max, round_half_up};

const GRID_POINTS: usize = 256;

/// Incubation law given features: anything with a conditional density and
/// distribution function.
pub trait ConditionalLaw: Sync {
    fn pdf(&self, x: &FeaturePoint, y: f64) -> f64;
    fn cdf(&self, x: &FeaturePoint, y: f64) -> f64;

    fn sf(&self, x: &FeaturePoint, y: f64) -> f64 {
        1.0 - self.cdf(x, y)
    }

    /// Rejects feature points where the law is undefined.
    fn check(&self, _x: &FeaturePoint) -> Result<()> {
        Ok(())
    }
}

impl ConditionalIncubationModel {
    fn weibull_unchecked(&self, age: u32) -> WeibullParams {
        WeibullParams { shape: self.shape, scale: self.scale(age as f64) }
    }
}

impl ConditionalLaw for ConditionalIncubationModel {
    fn pdf(&self, x: &FeaturePoint, y: f64) -> f64 {
        self.weibull_unchecked(x.age).pdf(y)
    }

    fn cdf(&self, x: &FeaturePoint, y: f64) -> f64 {
        self.weibull_unchecked(x.age).cdf(y)
    }

    fn sf(&self, x: &FeaturePoint, y: f64) -> f64 {
        self.weibull_unchecked(x.age).sf(y)
    }

    fn check(&self, x: &FeaturePoint) -> Result<()> {
        self.checked_scale(x.age as f64).map(|_| ())
    }
}

/// `y ↦ factor · f1(y|x)` on `(0, y_max]` with its mode located.
#[derive(Clone)]
pub struct RatioCurve<'a> {
    law: &'a dyn ConditionalLaw,
    feature: FeaturePoint,
    factor: f64,
    y_max: f64,
    mode: f64,
    peak: f64,
    tail: f64,
    interior_maxima: usize,
    grid: Vec<f64>,
}

impl std::fmt::Debug for RatioCurve<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RatioCurve")
            .field("feature", &self.feature)
            .field("factor", &self.factor)
            .field("mode", &self.mode)
            .field("peak", &self.peak)
            .finish()
    }
}

impl<'a> RatioCurve<'a> {
    /// Curve with an explicit feature-density ratio `f1(x)/f0(x)`.
    pub fn new(law: &'a dyn ConditionalLaw, feature: FeaturePoint, factor: f64, y_max: f64) -> Result<Self> {
        if !(y_max > 0.0 && y_max.is_finite()) {
            return Err(Error::InvalidParameter(format!("y_max must be positive, got {y_max}")));
        }
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::VanishingInfectedDensity(feature));
        }
        law.check(&feature)?;
        let step = y_max / GRID_POINTS as f64;
        let grid: Vec<f64> = (1..=GRID_POINTS).map(|k| factor * law.pdf(&feature, step * k as f64)).collect();
        let best = grid
            .iter()
            .enumerate()
            .fold(0, |best, (k, v)| if *v > grid[best] { k } else { best });
        let lo = if best == 0 { 0.0 } else { step * best as f64 };
        let hi = (step * (best + 2) as f64).min(y_max);
        let value = |y: f64| if y > 0.0 { factor * law.pdf(&feature, y) } else { 0.0 };
        let (mut mode, mut peak) = golden_section_max(value, lo, hi, 1e-9);
        if grid[best] > peak {
            mode = step * (best + 1) as f64;
            peak = grid[best];
        }
        // A density decreasing from zero has its supremum at 0⁺; treat the
        // first grid point as the mode so the superlevel set is (0, crossing].
        if best == 0 && mode < 1e-6 {
            let first = value(1e-6);
            if first > peak {
                mode = 1e-6;
                peak = first;
            }
        }
        let interior_maxima = (1..GRID_POINTS - 1)
            .filter(|&k| grid[k] > grid[k - 1] && grid[k] >= grid[k + 1])
            .count();
        let tail = grid[GRID_POINTS - 1];
        Ok(RatioCurve { law, feature, factor, y_max, mode, peak, tail, interior_maxima, grid })
    }

    pub fn feature(&self) -> FeaturePoint {
        self.feature
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn mode(&self) -> f64 {
        self.mode
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// Curve value at `y_max`.
    pub fn tail_value(&self) -> f64 {
        self.tail
    }

    pub fn value(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        self.factor * self.law.pdf(&self.feature, y)
    }

    pub fn conditional_cdf(&self, y: f64) -> f64 {
        self.law.cdf(&self.feature, y)
    }

    pub fn conditional_sf(&self, y: f64) -> f64 {
        self.law.sf(&self.feature, y)
    }

    /// More than one strict local maximum on the scan grid.
    pub fn is_multimodal(&self) -> bool {
        self.interior_maxima > 1
    }

    /// Right end of `{y ∈ (0, y_max] : curve(y) ≥ c}`, zero when empty.
    pub fn superlevel_duration(&self, c: f64) -> Result<f64> {
        if !(c > 0.0) {
            return Err(Error::Domain { what: "threshold", value: c });
        }
        if c > self.peak {
            return Ok(0.0);
        }
        if c <= self.tail {
            return Ok(self.y_max);
        }
        let step = self.y_max / GRID_POINTS as f64;
        let last_above = self.grid.iter().rposition(|v| *v >= c);
        let lo = match last_above {
            Some(k) => (step * (k + 1) as f64).max(self.mode),
            None => self.mode,
        };
        let hi = ((lo / step).floor() + 1.0) * step;
        let hi = hi.min(self.y_max);
        Ok(bisect_boundary(lo, hi, |y| self.value(y) >= c, 1e-8, 200))
    }
}

pub fn superlevel_duration(curve: &RatioCurve<'_>, c: f64) -> Result<f64> {
    curve.superlevel_duration(c)
}

/// Curve at `x` with ratio `f1(x)/f0(x)`.
pub fn ratio_curve<'a>(
    x: FeaturePoint,
    law: &'a dyn ConditionalLaw,
    f1: &DensityEstimate,
    f0: &DensityEstimate,
    y_max: f64,
) -> Result<RatioCurve<'a>> {
    let ratio = crate::density::density_ratio_features(f1, f0, &x)?;
    RatioCurve::new(law, x, ratio, y_max)
}

/// Ratio curves over a whole feature support, sorted by feature point.
#[derive(Debug, Clone)]
pub struct RatioCurves<'a> {
    curves: Vec<RatioCurve<'a>>,
}

impl<'a> RatioCurves<'a> {
    /// Curves on the support of `f0`, with `f0` multiplied by `weight` when
    /// given.
    pub fn build(
        law: &'a dyn ConditionalLaw,
        f1: &DensityEstimate,
        f0: &DensityEstimate,
        weight: Option<&BTreeMap<FeaturePoint, f64>>,
        y_max: f64,
    ) -> Result<Self> {
        let factors = f0
            .iter()
            .map(|(x, p0)| {
                let w = match weight {
                    Some(map) => {
                        let w = *map.get(&x).ok_or(Error::SupportMismatch(x))?;
                        if !(w > 0.0 && w.is_finite()) {
                            return Err(Error::InvalidParameter(format!("cost weight at {x} must be positive, got {w}")));
                        }
                        w
                    }
                    None => 1.0,
                };
                if !(p0 > 0.0) {
                    return Err(Error::ZeroDensity(x));
                }
                Ok((x, f1.weight(&x) / (w * p0)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_factors(law, &factors, y_max)
    }

    pub fn from_factors(law: &'a dyn ConditionalLaw, factors: &[(FeaturePoint, f64)], y_max: f64) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Empty("feature support"));
        }
        let mut curves = factors
            .par_iter()
            .map(|&(x, factor)| RatioCurve::new(law, x, factor, y_max))
            .collect::<Result<Vec<_>>>()?;
        curves.sort_by_key(|c| c.feature);
        Ok(RatioCurves { curves })
    }

    pub fn iter(&self) -> impl Iterator<Item = &RatioCurve<'a>> {
        self.curves.iter()
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn get(&self, x: &FeaturePoint) -> Option<&RatioCurve<'a>> {
        self.curves.binary_search_by_key(x, |c| c.feature).ok().map(|i| &self.curves[i])
    }

    /// Smallest peak over the support.
    pub fn c_star(&self) -> f64 {
        self.curves.iter().map(|c| c.peak).fold(f64::INFINITY, f64::min)
    }

    /// Largest threshold at which every duration is capped at `y_max`.
    pub fn c_tail(&self) -> f64 {
        self.curves.iter().map(|c| c.tail).fold(f64::INFINITY, f64::min)
    }

    pub fn durations(&self, c: f64) -> Result<Vec<f64>> {
        self.curves.par_iter().map(|curve| curve.superlevel_duration(c)).collect()
    }

    /// Points whose curve has more than one interior maximum.
    pub fn condition_violations(&self) -> Vec<FeaturePoint> {
        self.curves.iter().filter(|c| c.is_multimodal()).map(|c| c.feature).collect()
    }

    /// Escape probability when infected features are distributed as `mass`
    /// (aligned with the curves, summing to one).
    fn escape_aligned(&self, c: f64, mass: &[f64]) -> Result<f64> {
        let terms = self
            .curves
            .par_iter()
            .zip(mass.par_iter())
            .map(|(curve, &m)| {
                if m == 0.0 {
                    return Ok(0.0);
                }
                let t = curve.superlevel_duration(c)?;
                Ok(m * curve.conditional_sf(t))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(compensated_sum(terms).clamp(0.0, 1.0))
    }
}

pub fn c_star(curves: &RatioCurves<'_>) -> Result<f64> {
    if curves.is_empty() {
        return Err(Error::Empty("feature support"));
    }
    Ok(curves.c_star())
}

/// Distribution of infected individuals over the curve support.
#[derive(Debug, Clone, PartialEq)]
pub struct InfectedMass {
    mass: Vec<f64>,
    n: usize,
}

impl InfectedMass {
    /// Empirical distribution of an infected sample.
    pub fn from_sample(curves: &RatioCurves<'_>, infected: &[FeaturePoint]) -> Result<Self> {
        if infected.is_empty() {
            return Err(Error::Empty("infected sample"));
        }
        let mut counts = vec![0usize; curves.len()];
        for x in infected {
            let i = curves
                .curves
                .binary_search_by_key(x, |c| c.feature)
                .map_err(|_| Error::SupportMismatch(*x))?;
            counts[i] += 1;
        }
        let n = infected.len();
        Ok(InfectedMass { mass: counts.iter().map(|&k| k as f64 / n as f64).collect(), n })
    }

    /// Given probabilities per feature point, normalized to one.
    pub fn from_weights(curves: &RatioCurves<'_>, weights: &DensityEstimate) -> Result<Self> {
        let mass: Vec<f64> = curves.iter().map(|c| weights.weight(&c.feature)).collect();
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || mass.iter().any(|m| *m < 0.0) {
            return Err(Error::Empty("infected feature mass"));
        }
        Ok(InfectedMass { mass: mass.iter().map(|m| m / total).collect(), n: 0 })
    }

    /// Number of infected records behind an empirical mass; zero otherwise.
    pub fn sample_size(&self) -> usize {
        self.n
    }
}

/// `1 − mean F(t_c(X_i) | X_i)` over the infected features.
pub fn escape_probability(c: f64, curves: &RatioCurves<'_>, infected: &InfectedMass) -> Result<f64> {
    curves.escape_aligned(c, &infected.mass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSolution {
    pub c0: f64,
    pub c_star: f64,
    pub epsilon: f64,
    pub achieved_escape: f64,
    /// Escape at `c*` is already below the target, so `c0 = c*`.
    pub fallback_used: bool,
    /// Even capping every duration at `y_max` leaves escape above the target.
    pub saturated: bool,
    pub condition_violations: Vec<FeaturePoint>,
    pub capped_durations: Vec<FeaturePoint>,
}

/// Largest `c ∈ (0, c*]` with escape not above `epsilon`.
pub fn solve_threshold(epsilon: f64, curves: &RatioCurves<'_>, infected: &InfectedMass) -> Result<ThresholdSolution> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain { what: "epsilon", value: epsilon });
    }
    let c_star = c_star(curves)?;
    let condition_violations = curves.condition_violations();
    if !condition_violations.is_empty() {
        log::warn!(
            "{} feature point(s) have a multimodal ratio curve; durations use the largest crossing",
            condition_violations.len()
        );
    }
    let escape = |c: f64| escape_probability(c, curves, infected);
    let e_star = escape(c_star)?;
    let (c0, achieved_escape, fallback_used, saturated) = if e_star < epsilon {
        (c_star, e_star, true, false)
    } else {
        let c_tail = curves.c_tail().min(c_star).max(f64::MIN_POSITIVE);
        let e_tail = escape(c_tail)?;
        if e_tail > epsilon {
            log::warn!("escape {e_tail:.4} with every duration at y_max still exceeds epsilon {epsilon}");
            (c_tail, e_tail, false, true)
        } else {
            let (mut lo, mut hi) = (c_tail, c_star);
            let mut e_lo = e_tail;
            let mut found = None;
            while hi - lo >= 1e-10 * c_star {
                let mid = 0.5 * (lo + hi);
                let e = escape(mid)?;
                if (e - epsilon).abs() < 1e-6 {
                    found = Some((mid, e));
                    break;
                }
                if e <= epsilon {
                    lo = mid;
                    e_lo = e;
                } else {
                    hi = mid;
                }
            }
            let (c0, e0) = found.unwrap_or((lo, e_lo));
            (c0, e0, false, false)
        }
    };
    let capped_durations = curves.iter().filter(|c| c0 <= c.tail_value()).map(|c| c.feature()).collect::<Vec<_>>();
    if !capped_durations.is_empty() {
        log::warn!("{} duration(s) reach y_max; tail mass beyond it counts as escape", capped_durations.len());
    }
    Ok(ThresholdSolution {
        c0,
        c_star,
        epsilon,
        achieved_escape,
        fallback_used,
        saturated,
        condition_violations,
        capped_durations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RuleProvenance {
    Optimal { c0: f64, epsilon: f64 },
    UnconditionalQuantile { p: f64 },
    ConditionalQuantile { p: f64 },
    Custom { label: String },
}

impl RuleProvenance {
    pub fn label(&self) -> String {
        match self {
            RuleProvenance::Optimal { .. } => "optimal".to_string(),
            RuleProvenance::UnconditionalQuantile { p } => format!("quantile_{p}"),
            RuleProvenance::ConditionalQuantile { p } => format!("conditional_quantile_{p}"),
            RuleProvenance::Custom { label } => label.clone(),
        }
    }
}

/// Quarantine duration per feature point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRule {
    pub durations: BTreeMap<FeaturePoint, f64>,
    pub provenance: RuleProvenance,
}

#[derive(Debug, Serialize, Deserialize)]
struct RuleRow {
    risk_level: String,
    age: u32,
    duration_days_fractional: f64,
    duration_days_rounded: f64,
}

impl QuarantineRule {
    pub fn new(durations: BTreeMap<FeaturePoint, f64>, provenance: RuleProvenance) -> Result<Self> {
        if let Some((x, d)) = durations.iter().find(|(_, d)| !(**d >= 0.0 && d.is_finite())) {
            return Err(Error::InvalidParameter(format!("duration at {x} must be nonnegative, got {d}")));
        }
        Ok(QuarantineRule { durations, provenance })
    }

    /// The same duration at every point of `support`.
    pub fn constant(support: &[FeaturePoint], days: f64, provenance: RuleProvenance) -> Result<Self> {
        Self::new(support.iter().map(|x| (*x, days)).collect(), provenance)
    }

    pub fn duration(&self, x: &FeaturePoint) -> Result<f64> {
        self.durations.get(x).copied().ok_or(Error::SupportMismatch(*x))
    }

    pub fn rounded(&self) -> QuarantineRule {
        QuarantineRule {
            durations: self.durations.iter().map(|(x, d)| (*x, round_half_up(*d))).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (x, d) in &self.durations {
            wtr.serialize(RuleRow {
                risk_level: x.risk_level.as_str().to_string(),
                age: x.age,
                duration_days_fractional: *d,
                duration_days_rounded: round_half_up(*d),
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the fractional durations of a rule CSV.
    pub fn read_csv<R: Read>(reader: R, provenance: RuleProvenance) -> Result<QuarantineRule> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut durations = BTreeMap::new();
        for (i, row) in rdr.deserialize::<RuleRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::schema(line, e.to_string()))?;
            let level = row.risk_level.parse().map_err(|e: String| Error::schema(line, e))?;
            let d = row.duration_days_fractional;
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::schema(line, format!("duration must be nonnegative, got {d}")));
            }
            if durations.insert(FeaturePoint::new(level, row.age), d).is_some() {
                return Err(Error::schema(line, "duplicate feature point"));
            }
        }
        if durations.is_empty() {
            return Err(Error::schema(1, "rule file has no rows"));
        }
        Ok(QuarantineRule { durations, provenance })
    }
}

/// Superlevel durations at the threshold meeting `epsilon`.
///
/// With `weight`, every curve uses `w(x)·f0(x)` in place of `f0(x)`, which
/// shortens quarantine where `w` is large.
pub fn optimal_rule(
    epsilon: f64,
    f1: &DensityEstimate,
    f0: &DensityEstimate,
    law: &dyn ConditionalLaw,
    infected: &[FeaturePoint],
    weight: Option<&BTreeMap<FeaturePoint, f64>>,
    y_max: f64,
) -> Result<(QuarantineRule, ThresholdSolution)> {
    let curves = RatioCurves::build(law, f1, f0, weight, y_max)?;
    let mass = InfectedMass::from_sample(&curves, infected)?;
    rule_from_curves(epsilon, &curves, &mass)
}

pub fn rule_from_curves(
    epsilon: f64,
    curves: &RatioCurves<'_>,
    infected: &InfectedMass,
) -> Result<(QuarantineRule, ThresholdSolution)> {
    let solution = solve_threshold(epsilon, curves, infected)?;
    let durations = curves.durations(solution.c0)?;
    let rule = QuarantineRule {
        durations: curves.iter().map(|c| c.feature()).zip(durations).collect(),
        provenance: RuleProvenance::Optimal { c0: solution.c0, epsilon },
    };
    Ok((rule, solution))
}
