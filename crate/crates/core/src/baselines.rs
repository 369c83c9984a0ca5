//! Quantile baseline rules, the average-quarantine-duration and escape
//! metrics, and the effective reproductive number after quarantine.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::density::{DensityEstimate, FeaturePoint};
use crate::error::{Error, Result};
use crate::incubation::ConditionalIncubationModel;
use crate::numeric::{compensated_sum, round_half_up};
use crate::rule_solver::{ConditionalLaw, QuarantineRule, RuleProvenance};

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain { what: "probability", value: p })
    }
}

/// Order statistic at 1-based index `⌈n·p⌉`.
pub fn sample_quantile(sample: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    if sample.is_empty() {
        return Err(Error::Empty("incubation sample"));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((n as f64 * p) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[k.min(n) - 1])
}

/// The sample `p`-quantile of the incubation times, for everyone.
pub fn unconditional_quantile_rule(sample: &[f64], p: f64, support: &[FeaturePoint]) -> Result<QuarantineRule> {
    let q = sample_quantile(sample, p)?;
    QuarantineRule::constant(support, q, RuleProvenance::UnconditionalQuantile { p })
}

/// Per-point `p`-quantile of the fitted conditional incubation law.
pub fn conditional_quantile_rule(
    model: &ConditionalIncubationModel,
    p: f64,
    support: &[FeaturePoint],
) -> Result<QuarantineRule> {
    check_p(p)?;
    let durations = support
        .iter()
        .map(|x| Ok((*x, model.weibull_at(x.age as f64)?.quantile(p))))
        .collect::<Result<_>>()?;
    QuarantineRule::new(durations, RuleProvenance::ConditionalQuantile { p })
}

fn duration(rule: &QuarantineRule, x: &FeaturePoint, round: bool) -> Result<f64> {
    let d = rule.duration(x)?;
    Ok(if round { round_half_up(d) } else { d })
}

/// `Σ_x f0(x) t(x)`, optionally with durations rounded to whole days.
pub fn average_quarantine_duration(rule: &QuarantineRule, f0: &DensityEstimate, round: bool) -> Result<f64> {
    let terms = f0
        .iter()
        .map(|(x, w)| Ok(w * duration(rule, &x, round)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(terms))
}

/// Fraction of infected records whose ceiled incubation exceeds the duration.
pub fn empirical_escape(rule: &QuarantineRule, infected: &[(FeaturePoint, f64)], round: bool) -> Result<f64> {
    if infected.is_empty() {
        return Err(Error::Empty("infected records"));
    }
    let mut escaped = 0usize;
    for (x, z) in infected {
        if *z > duration(rule, x, round)? {
            escaped += 1;
        }
    }
    Ok(escaped as f64 / infected.len() as f64)
}

/// `1 − Σ_x f1(x) F(t(x) | x)` under a known conditional law.
pub fn expected_escape(
    rule: &QuarantineRule,
    law: &dyn ConditionalLaw,
    f1: &DensityEstimate,
    round: bool,
) -> Result<f64> {
    let terms = f1
        .iter()
        .map(|(x, w)| Ok(w * law.sf(&x, duration(rule, &x, round)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((compensated_sum(terms) / f1.total_mass()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReproductionNumber {
    pub value: f64,
    /// The epidemic dies out (`value < 1`).
    pub controlled: bool,
}

/// `(1−θ)R0 + θεR0`: a fraction `θ` of transmission is quarantined and a
/// fraction `ε` of those escape.
pub fn effective_reproductive_number(theta: f64, epsilon: f64, r0: f64) -> Result<ReproductionNumber> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Domain { what: "theta", value: theta });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Domain { what: "epsilon", value: epsilon });
    }
    if !(r0 > 0.0 && r0.is_finite()) {
        return Err(Error::Domain { what: "r0", value: r0 });
    }
    let value = r0 * (1.0 - theta * (1.0 - epsilon));
    Ok(ReproductionNumber { value, controlled: value < 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub aqd: f64,
    pub ep: f64,
    pub n_infected: usize,
    pub rounded: bool,
}

impl EvaluationReport {
    /// AQD against `f0` and empirical escape on the infected records.
    pub fn evaluate(
        method: impl Into<String>,
        rule: &QuarantineRule,
        f0: &DensityEstimate,
        infected: &[(FeaturePoint, f64)],
        round: bool,
    ) -> Result<Self> {
        Ok(EvaluationReport {
            method: method.into(),
            aqd: average_quarantine_duration(rule, f0, round)?,
            ep: empirical_escape(rule, infected, round)?,
            n_infected: infected.len(),
            rounded: round,
        })
    }
}

pub fn write_reports_csv<W: Write>(reports: &[EvaluationReport], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in reports {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
