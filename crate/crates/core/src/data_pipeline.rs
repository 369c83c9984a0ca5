//! Ingestion of quarantine records, population age tables and country case
//! counts; risk grouping by current infection index; multiple imputation of
//! missing incubation times; and the fit-then-solve workflows built on them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    average_quarantine_duration, conditional_quantile_rule, empirical_escape, sample_quantile, EvaluationReport,
};
use crate::density::{fit_kernel_density, tabulated_density, AgeSupport, Bandwidth, DensityEstimate, FeaturePoint, RiskLevel};
use crate::distributions::{TruncNormalParams, DEFAULT_Y_MAX};
use crate::error::{Error, Result};
use crate::incubation::{fit_incubation_model, ConditionalIncubationModel, FitOptions, FitReport, Likelihood, Observation};
use crate::numeric::round_half_up;
use crate::rule_solver::{optimal_rule, QuarantineRule, RuleProvenance, ThresholdSolution};

/// One row of `records.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub age: u32,
    /// `RiskLevel::None` when the file leaves the level blank.
    pub risk_level: RiskLevel,
    pub infected: bool,
    /// Incubation time: ceiled days, or exact days for continuous data.
    pub z: Option<f64>,
}

impl QuarantineRecord {
    pub fn feature(&self) -> FeaturePoint {
        FeaturePoint::new(self.risk_level, self.age)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub age_support: AgeSupport,
    /// Infected rows may leave `z` blank (imputation inputs).
    pub allow_missing_z: bool,
    /// `z` may be any positive real rather than a positive integer.
    pub continuous_z: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { age_support: AgeSupport::default(), allow_missing_z: false, continuous_z: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecords {
    pub records: Vec<QuarantineRecord>,
    /// Rows skipped because their age lies outside the support.
    pub dropped_out_of_support: usize,
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::schema(1, format!("missing column `{name}`")))
}

fn read_headers<R: Read>(rdr: &mut csv::Reader<R>) -> Result<csv::StringRecord> {
    let headers = rdr.headers().map_err(|e| Error::schema(1, e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::schema(1, "file is empty; expected a header row"));
    }
    Ok(headers)
}

fn row_line(row: &csv::StringRecord, fallback: usize) -> usize {
    row.position().map(|p| p.line() as usize).unwrap_or(fallback)
}

/// Reads `records.csv` (`age,risk_level,infected,z`).
pub fn load_records<R: Read>(reader: R, options: &LoadOptions) -> Result<LoadedRecords> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = read_headers(&mut rdr)?;
    let [i_age, i_level, i_inf, i_z] = ["age", "risk_level", "infected", "z"].map(|n| header_index(&headers, n));
    let (i_age, i_level, i_inf, i_z) = (i_age?, i_level?, i_inf?, i_z?);
    let mut records = Vec::new();
    let mut dropped = 0;
    for (k, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::schema(k + 2, e.to_string()))?;
        let line = row_line(&row, k + 2);
        let field = |i: usize| row.get(i).unwrap_or("");
        let age: u32 = field(i_age)
            .parse()
            .map_err(|_| Error::schema(line, format!("age must be a nonnegative integer, got {:?}", field(i_age))))?;
        let risk_level: RiskLevel = field(i_level).parse().map_err(|e: String| Error::schema(line, e))?;
        let infected = match field(i_inf) {
            "1" => true,
            "0" => false,
            other => return Err(Error::schema(line, format!("infected must be 0 or 1, got {other:?}"))),
        };
        let z = match field(i_z) {
            "" => None,
            text => {
                let v: f64 = text.parse().map_err(|_| Error::schema(line, format!("z must be numeric, got {text:?}")))?;
                let valid = if options.continuous_z { v > 0.0 && v.is_finite() } else { v >= 1.0 && v.fract() == 0.0 };
                if !valid {
                    let kind = if options.continuous_z { "a positive number" } else { "a positive integer" };
                    return Err(Error::schema(line, format!("z must be {kind}, got {text}")));
                }
                Some(v)
            }
        };
        match (infected, z) {
            (false, Some(_)) => return Err(Error::schema(line, "z is given for an uninfected record")),
            (true, None) if !options.allow_missing_z => {
                return Err(Error::schema(line, "z is missing for an infected record"))
            }
            _ => {}
        }
        if !options.age_support.contains(age) {
            dropped += 1;
            continue;
        }
        records.push(QuarantineRecord { age, risk_level, infected, z });
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} record(s) with age outside {}..={}", options.age_support.min, options.age_support.max);
    }
    Ok(LoadedRecords { records, dropped_out_of_support: dropped })
}

pub fn write_records<W: Write>(records: &[QuarantineRecord], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["age", "risk_level", "infected", "z"])?;
    for r in records {
        let z = r.z.map(|z| z.to_string()).unwrap_or_default();
        let level = if r.risk_level == RiskLevel::None { "" } else { r.risk_level.as_str() };
        wtr.write_record([r.age.to_string().as_str(), level, if r.infected { "1" } else { "0" }, z.as_str()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Age distribution from `population.csv` (`age,weight`), normalized over
/// the ages that fall inside `support`.
pub fn population_weights<R: Read>(reader: R, support: AgeSupport) -> Result<DensityEstimate> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = read_headers(&mut rdr)?;
    let (i_age, i_w) = (header_index(&headers, "age")?, header_index(&headers, "weight")?);
    let mut table = BTreeMap::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::schema(k + 2, e.to_string()))?;
        let line = row_line(&row, k + 2);
        let age: u32 = row[i_age]
            .parse()
            .map_err(|_| Error::schema(line, format!("age must be a nonnegative integer, got {:?}", &row[i_age])))?;
        let w: f64 = row[i_w].parse().map_err(|_| Error::schema(line, format!("weight must be numeric, got {:?}", &row[i_w])))?;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::schema(line, format!("weight must be nonnegative, got {w}")));
        }
        if support.contains(age) && table.insert(FeaturePoint::age_only(age), w).is_some() {
            return Err(Error::schema(line, format!("duplicate age {age}")));
        }
    }
    if table.is_empty() {
        return Err(Error::Empty("population table"));
    }
    let total: f64 = table.values().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("population weights sum to zero".into()));
    }
    tabulated_density(&table.into_iter().map(|(x, w)| (x, w / total)).collect())
}

pub fn write_population<W: Write>(weights: &DensityEstimate, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["age", "weight"])?;
    for (x, w) in weights.iter() {
        wtr.write_record([x.age.to_string(), format!("{w:.17e}")])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row of `cases.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryCaseCount {
    pub country: String,
    pub new_cases_14d: u64,
    pub population: u64,
}

/// Current infection index: new cases over the last two weeks per million.
pub fn compute_cii(c: &CountryCaseCount) -> Result<f64> {
    if c.population == 0 {
        return Err(Error::InvalidParameter(format!("population of {} is zero", c.country)));
    }
    Ok(1e6 * c.new_cases_14d as f64 / c.population as f64)
}

/// High above 300, medium above 50, low otherwise.
pub fn risk_group(cii: f64) -> RiskLevel {
    if cii > 300.0 {
        RiskLevel::High
    } else if cii > 50.0 {
        RiskLevel::Medium
    } else {
        RiskLevel::Low
    }
}

pub fn load_case_counts<R: Read>(reader: R) -> Result<Vec<CountryCaseCount>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    read_headers(&mut rdr)?;
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<CountryCaseCount>().enumerate() {
        let row = row.map_err(|e| Error::schema(k + 2, e.to_string()))?;
        if row.population == 0 {
            return Err(Error::schema(k + 2, format!("population of {} is zero", row.country)));
        }
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Empty("case table"));
    }
    Ok(out)
}

pub fn write_case_counts<W: Write>(cases: &[CountryCaseCount], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for c in cases {
        wtr.serialize(c)?;
    }
    wtr.flush()?;
    Ok(())
}

fn grouped_shares(cases: &[CountryCaseCount], value: impl Fn(&CountryCaseCount) -> u64) -> Result<BTreeMap<RiskLevel, f64>> {
    let mut shares = BTreeMap::new();
    for c in cases {
        *shares.entry(risk_group(compute_cii(c)?)).or_insert(0.0) += value(c) as f64;
    }
    Ok(shares)
}

/// Share of recent cases per risk level.
pub fn case_shares(cases: &[CountryCaseCount]) -> Result<BTreeMap<RiskLevel, f64>> {
    grouped_shares(cases, |c| c.new_cases_14d)
}

/// Share of population per risk level.
pub fn population_shares(cases: &[CountryCaseCount]) -> Result<BTreeMap<RiskLevel, f64>> {
    grouped_shares(cases, |c| c.population)
}

/// Completes missing `z` of infected records `m` times, each from its own
/// stream seeded with `seed + j`; a missing value is `max(⌈Y⌉, 1)` with `Y`
/// drawn from the model at the record's age.
pub fn multiple_imputation(
    records: &[QuarantineRecord],
    model: &ConditionalIncubationModel,
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<QuarantineRecord>>> {
    if m == 0 {
        return Err(Error::InvalidParameter("at least one imputation is required".into()));
    }
    for r in records.iter().filter(|r| r.infected && r.z.is_none()) {
        if !model.age_support.contains(r.age) {
            return Err(Error::Domain { what: "record age", value: r.age as f64 });
        }
        model.checked_scale(r.age as f64)?;
    }
    (0..m)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
            records
                .iter()
                .map(|r| {
                    if r.infected && r.z.is_none() {
                        let y = model.sample(r.age as f64, &mut rng)?;
                        Ok(QuarantineRecord { z: Some(y.ceil().max(1.0)), ..*r })
                    } else {
                        Ok(*r)
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowOptions {
    pub age_support: AgeSupport,
    pub bandwidth: Bandwidth,
    pub likelihood: Likelihood,
    pub y_max: f64,
    pub round: bool,
    pub quantile_level: f64,
}

impl Default for WorkflowOptions {
    fn default() -> Self {
        WorkflowOptions {
            age_support: AgeSupport::default(),
            bandwidth: Bandwidth::Auto,
            likelihood: Likelihood::Ceiled,
            y_max: DEFAULT_Y_MAX,
            round: true,
            quantile_level: 0.95,
        }
    }
}

/// Everything the solver needs, estimated from data.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedInputs {
    pub report: FitReport,
    pub f1: DensityEstimate,
    pub f0: DensityEstimate,
    /// Infected feature points with their incubation times.
    pub infected: Vec<(FeaturePoint, f64)>,
}

/// `f1` from the infected records' features, with level proportions taken
/// from recent case counts when `cases` is given.
pub fn infected_feature_density(
    records: &[QuarantineRecord],
    cases: Option<&[CountryCaseCount]>,
    options: &WorkflowOptions,
) -> Result<DensityEstimate> {
    let features: Vec<FeaturePoint> = records.iter().filter(|r| r.infected).map(|r| r.feature()).collect();
    let f1 = fit_kernel_density(&features, options.bandwidth, options.age_support)?;
    match cases {
        Some(cases) if features.iter().any(|x| x.risk_level != RiskLevel::None) => {
            let present = f1.level_shares();
            let shares: BTreeMap<_, _> = case_shares(cases)?.into_iter().filter(|(l, _)| present.contains_key(l)).collect();
            f1.with_level_shares(&shares)
        }
        _ => Ok(f1),
    }
}

/// `f0` from a population table (crossed with population shares per risk
/// level when the records carry levels), or else from the uninfected records.
pub fn uninfected_feature_density(
    records: &[QuarantineRecord],
    population: Option<&DensityEstimate>,
    cases: Option<&[CountryCaseCount]>,
    options: &WorkflowOptions,
) -> Result<DensityEstimate> {
    let has_levels = records.iter().any(|r| r.risk_level != RiskLevel::None);
    match population {
        Some(pop) if has_levels => {
            let cases = cases.ok_or_else(|| {
                Error::InvalidParameter("records carry risk levels: a case table is needed to split the population".into())
            })?;
            let levels: BTreeMap<RiskLevel, ()> = records.iter().map(|r| (r.risk_level, ())).collect();
            let shares: BTreeMap<_, _> =
                population_shares(cases)?.into_iter().filter(|(l, _)| levels.contains_key(l)).collect();
            pop.crossed_with_levels(&shares)
        }
        Some(pop) => Ok(pop.clone()),
        None => {
            let features: Vec<FeaturePoint> = records.iter().filter(|r| !r.infected).map(|r| r.feature()).collect();
            if features.is_empty() {
                return Err(Error::InsufficientData(
                    "no uninfected records and no population table to estimate the uninfected feature law".into(),
                ));
            }
            fit_kernel_density(&features, options.bandwidth, options.age_support)
        }
    }
}

fn observations(records: &[QuarantineRecord]) -> Vec<Observation> {
    records
        .iter()
        .filter(|r| r.infected)
        .filter_map(|r| r.z.map(|z| Observation::new(r.age as f64, z)))
        .collect()
}

pub fn infected_with_times(records: &[QuarantineRecord]) -> Vec<(FeaturePoint, f64)> {
    records.iter().filter(|r| r.infected).filter_map(|r| r.z.map(|z| (r.feature(), z))).collect()
}

/// Fits the incubation model and both feature densities.
pub fn fit_inputs(
    records: &[QuarantineRecord],
    population: Option<&DensityEstimate>,
    cases: Option<&[CountryCaseCount]>,
    options: &WorkflowOptions,
) -> Result<FittedInputs> {
    let obs = observations(records);
    let report = fit_incubation_model(
        &obs,
        &FitOptions { likelihood: options.likelihood, age_support: options.age_support, ..FitOptions::default() },
    )?;
    Ok(FittedInputs {
        report,
        f1: infected_feature_density(records, cases, options)?,
        f0: uninfected_feature_density(records, population, cases, options)?,
        infected: infected_with_times(records),
    })
}

/// The three rules and their evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    pub quantile: QuarantineRule,
    pub conditional_quantile: QuarantineRule,
    pub optimal: QuarantineRule,
    pub solution: ThresholdSolution,
}

impl RuleSet {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &QuarantineRule)> {
        [("quantile", &self.quantile), ("conditional_quantile", &self.conditional_quantile), ("optimal", &self.optimal)]
            .into_iter()
    }
}

/// Quantile baselines and the optimal rule on the support of `f0`.
pub fn solve_rules(
    inputs: &FittedInputs,
    epsilon: f64,
    weight: Option<&BTreeMap<FeaturePoint, f64>>,
    options: &WorkflowOptions,
) -> Result<RuleSet> {
    let support = inputs.f0.support();
    let times: Vec<f64> = inputs.infected.iter().map(|(_, z)| *z).collect();
    let p = options.quantile_level;
    let quantile = QuarantineRule::constant(support, sample_quantile(&times, p)?, RuleProvenance::UnconditionalQuantile { p })?;
    let conditional_quantile = conditional_quantile_rule(&inputs.report.model, p, support)?;
    let features: Vec<FeaturePoint> = inputs.infected.iter().map(|(x, _)| *x).collect();
    let (optimal, solution) =
        optimal_rule(epsilon, &inputs.f1, &inputs.f0, &inputs.report.model, &features, weight, options.y_max)?;
    Ok(RuleSet { quantile, conditional_quantile, optimal, solution })
}

pub fn evaluate_rules(rules: &RuleSet, f0: &DensityEstimate, infected: &[(FeaturePoint, f64)], round: bool) -> Result<Vec<EvaluationReport>> {
    rules.iter().map(|(label, rule)| EvaluationReport::evaluate(label, rule, f0, infected, round)).collect()
}

/// Result of the imputed analysis: rules and metrics averaged over the
/// completed datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedAnalysis {
    pub rules: RuleSet,
    pub reports: Vec<EvaluationReport>,
    pub solutions: Vec<ThresholdSolution>,
    pub f1: DensityEstimate,
    pub f0: DensityEstimate,
}

fn average_rules(rules: &[&QuarantineRule]) -> QuarantineRule {
    let n = rules.len() as f64;
    let mut durations: BTreeMap<FeaturePoint, f64> = BTreeMap::new();
    for r in rules {
        for (x, d) in &r.durations {
            *durations.entry(*x).or_insert(0.0) += d / n;
        }
    }
    QuarantineRule { durations, provenance: rules[0].provenance.clone() }
}

/// Imputes missing incubation times `m` times, refits and solves on each
/// completed dataset, and averages durations, AQD and escape over them.
#[allow(clippy::too_many_arguments)]
pub fn imputed_analysis(
    records: &[QuarantineRecord],
    model: &ConditionalIncubationModel,
    population: Option<&DensityEstimate>,
    cases: Option<&[CountryCaseCount]>,
    epsilon: f64,
    m: usize,
    seed: u64,
    weight: Option<&BTreeMap<FeaturePoint, f64>>,
    options: &WorkflowOptions,
) -> Result<ImputedAnalysis> {
    let f1 = infected_feature_density(records, cases, options)?;
    let f0 = uninfected_feature_density(records, population, cases, options)?;
    let datasets = multiple_imputation(records, model, m, seed)?;
    let per_dataset = datasets
        .par_iter()
        .map(|data| {
            let obs = observations(data);
            let report = fit_incubation_model(
                &obs,
                &FitOptions {
                    likelihood: Likelihood::Ceiled,
                    age_support: options.age_support,
                    init: Some((model.shape, model.recentered(0.0).gamma)),
                    ..FitOptions::default()
                },
            )?;
            let inputs = FittedInputs { report, f1: f1.clone(), f0: f0.clone(), infected: infected_with_times(data) };
            let rules = solve_rules(&inputs, epsilon, weight, options)?;
            let reports = evaluate_rules(&rules, &f0, &inputs.infected, options.round)?;
            Ok((rules, reports))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_dataset.len() as f64;
    let pick = |f: fn(&RuleSet) -> &QuarantineRule| average_rules(&per_dataset.iter().map(|(r, _)| f(r)).collect::<Vec<_>>());
    let mut reports = per_dataset[0].1.clone();
    for (k, report) in reports.iter_mut().enumerate() {
        report.aqd = per_dataset.iter().map(|(_, r)| r[k].aqd).sum::<f64>() / n;
        report.ep = per_dataset.iter().map(|(_, r)| r[k].ep).sum::<f64>() / n;
    }
    let solutions: Vec<ThresholdSolution> = per_dataset.iter().map(|(r, _)| r.solution.clone()).collect();
    let rules = RuleSet {
        quantile: pick(|r| &r.quantile),
        conditional_quantile: pick(|r| &r.conditional_quantile),
        optimal: pick(|r| &r.optimal),
        solution: solutions[0].clone(),
    };
    Ok(ImputedAnalysis { rules, reports, solutions, f1, f0 })
}

/// AQD of a rule against `f0` after optional rounding.
pub fn rule_aqd(rule: &QuarantineRule, f0: &DensityEstimate, round: bool) -> Result<f64> {
    average_quarantine_duration(rule, f0, round)
}

pub fn rule_escape(rule: &QuarantineRule, infected: &[(FeaturePoint, f64)], round: bool) -> Result<f64> {
    empirical_escape(rule, infected, round)
}

/// Synthetic stand-ins for the real datasets, drawn from the published
/// working-model estimates.
pub mod fixtures {
    use super::*;
    use rand::Rng;

    /// Working model with the published age-only estimates.
    pub fn published_model() -> ConditionalIncubationModel {
        ConditionalIncubationModel::new(1.57, [9.09, -0.11, 0.0015], AgeSupport::default())
            .expect("published estimates give a positive scale on 11..=80")
    }

    /// Infected age law proxy: normal(47, 15²) rounded into 11..=80.
    pub fn infected_age_law() -> TruncNormalParams {
        TruncNormalParams::new(47.0, 225.0, 10.5, 80.5).expect("interval has mass")
    }

    /// Population age law proxy on 11..=80.
    pub fn population_age_law() -> TruncNormalParams {
        TruncNormalParams::new(36.0, 484.0, 10.5, 80.5).expect("interval has mass")
    }

    fn draw_age<R: Rng + ?Sized>(law: &TruncNormalParams, rng: &mut R) -> u32 {
        (round_half_up(law.sample(rng)) as u32).clamp(11, 80)
    }

    /// `n` infected records with ages from the proxy law and ceiled
    /// incubation from `published_model`.
    pub fn age_records(n: usize, seed: u64) -> Vec<QuarantineRecord> {
        let model = published_model();
        let ages = infected_age_law();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let age = draw_age(&ages, &mut rng);
                let y = model.sample(age as f64, &mut rng).expect("age in support");
                QuarantineRecord { age, risk_level: RiskLevel::None, infected: true, z: Some(y.ceil().max(1.0)) }
            })
            .collect()
    }

    /// Population age weights proportional to the proxy density.
    pub fn population() -> DensityEstimate {
        let law = population_age_law();
        let table: BTreeMap<_, _> = AgeSupport::default().ages().map(|a| (FeaturePoint::age_only(a), law.pdf(a as f64))).collect();
        let total: f64 = table.values().sum();
        tabulated_density(&table.into_iter().map(|(x, w)| (x, w / total)).collect()).expect("positive weights")
    }

    /// Infected patients from three risk levels with missing incubation
    /// times: high-risk patients skew older, low-risk younger.
    pub fn risk_records(n: usize, seed: u64) -> Vec<QuarantineRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let laws = [
            (RiskLevel::High, 0.5, TruncNormalParams::new(50.0, 225.0, 10.5, 80.5).expect("mass")),
            (RiskLevel::Medium, 0.3, TruncNormalParams::new(45.0, 256.0, 10.5, 80.5).expect("mass")),
            (RiskLevel::Low, 0.2, TruncNormalParams::new(40.0, 289.0, 10.5, 80.5).expect("mass")),
        ];
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let (level, _, law) = if u < laws[0].1 {
                    &laws[0]
                } else if u < laws[0].1 + laws[1].1 {
                    &laws[1]
                } else {
                    &laws[2]
                };
                QuarantineRecord { age: draw_age(law, &mut rng), risk_level: *level, infected: true, z: None }
            })
            .collect()
    }

    /// Nine countries, three per risk level; most recent cases come from
    /// high-risk countries and most people live in low-risk ones.
    pub fn case_counts() -> Vec<CountryCaseCount> {
        let rows = [
            ("high_a", 12_000, 20_000_000),
            ("high_b", 6_500, 15_000_000),
            ("high_c", 4_000, 10_000_000),
            ("medium_a", 2_000, 20_000_000),
            ("medium_b", 1_500, 10_000_000),
            ("medium_c", 900, 6_000_000),
            ("low_a", 1_000, 60_000_000),
            ("low_b", 800, 40_000_000),
            ("low_c", 100, 30_000_000),
        ];
        rows.iter()
            .map(|(c, a, b)| CountryCaseCount { country: c.to_string(), new_cases_14d: *a, population: *b })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<LoadedRecords> {
        load_records(text.as_bytes(), &LoadOptions::default())
    }

    #[test]
    fn empty_body_gives_no_records() {
        let loaded = load("age,risk_level,infected,z\n").unwrap();
        assert!(loaded.records.is_empty());
        let err = load("").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }), "{err}");
    }

    #[test]
    fn out_of_support_rows_are_dropped() {
        let text = "age,risk_level,infected,z\n30,,1,5\n8,,1,3\n45,high,0,\n60,low,1,12\n77,,0,\n";
        let loaded = load(text).unwrap();
        assert_eq!(loaded.records.len(), 4);
        assert_eq!(loaded.dropped_out_of_support, 1);
        assert_eq!(loaded.records[1].risk_level, RiskLevel::High);
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = load("age,risk_level,infected,z\n30,,1,5\n31,,2,4\n").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err}");
        let err = load("age,risk_level,infected,z\n30,,0,5\n").unwrap_err();
        assert!(err.to_string().contains("uninfected"));
        let err = load("age,risk_level,infected,z\n30,,1,\n").unwrap_err();
        assert!(err.to_string().contains("missing"));
        let err = load("age,risk_level,infected,z\n30,,1,2.5\n").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 2, .. }));
        let continuous = LoadOptions { continuous_z: true, ..LoadOptions::default() };
        assert_eq!(load_records("age,risk_level,infected,z\n30,,1,2.5\n".as_bytes(), &continuous).unwrap().records[0].z, Some(2.5));
        let err = load("age,level,infected,z\n").unwrap_err();
        assert!(err.to_string().contains("risk_level"));
    }

    #[test]
    fn records_round_trip() {
        let records = fixtures::age_records(50, 1);
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        assert_eq!(load(std::str::from_utf8(&buf).unwrap()).unwrap().records, records);
    }

    #[test]
    fn cii_grouping() {
        let c = |a, b| CountryCaseCount { country: "x".into(), new_cases_14d: a, population: b };
        assert_eq!(compute_cii(&c(0, 1000)).unwrap(), 0.0);
        assert_eq!(risk_group(0.0), RiskLevel::Low);
        assert_eq!(compute_cii(&c(3000, 10_000_000)).unwrap(), 300.0);
        assert_eq!(risk_group(300.0), RiskLevel::Medium);
        assert_eq!(risk_group(compute_cii(&c(301, 1_000_000)).unwrap()), RiskLevel::High);
        assert_eq!(risk_group(50.0), RiskLevel::Low);
        assert_eq!(risk_group(50.000001), RiskLevel::Medium);
        assert!(compute_cii(&c(1, 0)).is_err());
    }

    #[test]
    fn fixture_countries_cover_each_level() {
        let shares = population_shares(&fixtures::case_counts()).unwrap();
        assert_eq!(shares.len(), 3);
        let cases = case_shares(&fixtures::case_counts()).unwrap();
        assert!(cases[&RiskLevel::High] > cases[&RiskLevel::Medium]);
        assert!(shares[&RiskLevel::Low] > shares[&RiskLevel::High]);
    }

    #[test]
    fn population_tables() {
        let uniform = population_weights("age,weight\n11,5\n12,5\n13,5\n".as_bytes(), AgeSupport::default()).unwrap();
        assert!(uniform.weights().iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-15));
        let point = population_weights("age,weight\n40,123\n".as_bytes(), AgeSupport::default()).unwrap();
        assert_eq!(point.weights(), &[1.0]);
        let mut text = String::from("age,weight\n");
        for a in 11..=80 {
            text.push_str(&format!("{a},{}\n", 1000 + 37 * (a % 7)));
        }
        let full = population_weights(text.as_bytes(), AgeSupport::default()).unwrap();
        assert!((full.total_mass() - 1.0).abs() < 1e-12);
        assert!(population_weights("age,weight\n40,-1\n".as_bytes(), AgeSupport::default()).is_err());
        assert!(population_weights("age,weight\n".as_bytes(), AgeSupport::default()).is_err());
    }

    #[test]
    fn degenerate_model_imputes_one_day() {
        let model = ConditionalIncubationModel::new(2.0, [1e-6, 0.0, 0.0], AgeSupport::default()).unwrap();
        let records = fixtures::risk_records(100, 3);
        let sets = multiple_imputation(&records, &model, 1, 9).unwrap();
        assert_eq!(sets.len(), 1);
        assert!(sets[0].iter().all(|r| r.z == Some(1.0)));
    }

    #[test]
    fn imputation_ignores_risk_level() {
        let model = fixtures::published_model();
        let records: Vec<_> = [RiskLevel::High, RiskLevel::Low]
            .iter()
            .flat_map(|&l| (0..5000).map(move |_| QuarantineRecord { age: 40, risk_level: l, infected: true, z: None }))
            .collect();
        let set = &multiple_imputation(&records, &model, 1, 4).unwrap()[0];
        let mean = |l: RiskLevel| {
            let zs: Vec<f64> = set.iter().filter(|r| r.risk_level == l).map(|r| r.z.unwrap()).collect();
            zs.iter().sum::<f64>() / zs.len() as f64
        };
        // Same law at the same age: means agree within sampling error.
        assert!((mean(RiskLevel::High) - mean(RiskLevel::Low)).abs() < 0.3);
    }

    #[test]
    fn imputation_rejects_unsupported_age() {
        let model = ConditionalIncubationModel::new(2.0, [5.0, 0.0, 0.0], AgeSupport::new(20, 60).unwrap()).unwrap();
        let records = [QuarantineRecord { age: 70, risk_level: RiskLevel::None, infected: true, z: None }];
        assert!(multiple_imputation(&records, &model, 2, 1).is_err());
    }

    #[test]
    fn age_only_workflow_shortens_quarantine() {
        let records = fixtures::age_records(1770, 2024);
        let options = WorkflowOptions::default();
        let inputs = fit_inputs(&records, Some(&fixtures::population()), None, &options).unwrap();
        let rules = solve_rules(&inputs, 0.05, None, &options).unwrap();
        let reports = evaluate_rules(&rules, &inputs.f0, &inputs.infected, true).unwrap();
        let aqd: Vec<f64> = reports.iter().map(|r| r.aqd).collect();
        assert!(aqd[2] < aqd[0] && aqd[2] < aqd[1], "{reports:?}");
    }
}
