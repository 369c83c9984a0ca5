use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use quarantine_core::baselines::{write_reports_csv, EvaluationReport};
use quarantine_core::data_pipeline::{
    evaluate_rules, fit_inputs, fixtures, imputed_analysis, infected_with_times, load_case_counts, load_records,
    population_shares, population_weights, solve_rules, write_case_counts, write_population, write_records,
    CountryCaseCount, FittedInputs, LoadOptions, QuarantineRecord, RuleSet, WorkflowOptions,
};
use quarantine_core::incubation::interval_fit_table;
use quarantine_core::rule_solver::ratio_curve;
use quarantine_core::simulation::{run_replications, theoretical_optimum, PipelineOptions, ScenarioSpec};
use quarantine_core::{DensityEstimate, FeaturePoint, FitReport, Likelihood, Observation, QuarantineRule, RiskLevel, RuleProvenance, ThresholdSolution};
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::output::{in_dir, open, write_atomic, write_json};

pub const FIT_REPORT: &str = "fit_report.json";
pub const F1_DENSITY: &str = "f1_density.csv";
pub const F0_DENSITY: &str = "f0_density.csv";
pub const INFECTED: &str = "infected.csv";
pub const INTERVAL_FIT: &str = "interval_fit.csv";
pub const SOLUTION: &str = "solution.json";
pub const EVALUATION: &str = "evaluation.csv";

/// How a command finished, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
    ConditionViolations,
}

fn workflow_options(settings: &Settings, likelihood: Likelihood) -> WorkflowOptions {
    WorkflowOptions {
        age_support: settings.age_support,
        bandwidth: settings.bandwidth,
        likelihood,
        y_max: settings.y_max,
        round: settings.round,
        ..WorkflowOptions::default()
    }
}

fn read_records(path: &Path, settings: &Settings, options: LoadOptions) -> Result<Vec<QuarantineRecord>> {
    let loaded = load_records(open(path)?, &LoadOptions { age_support: settings.age_support, ..options })
        .with_context(|| format!("reading {}", path.display()))?;
    if loaded.dropped_out_of_support > 0 {
        eprintln!("dropped {} record(s) outside the age support", loaded.dropped_out_of_support);
    }
    Ok(loaded.records)
}

fn read_population(path: &Path, settings: &Settings) -> Result<DensityEstimate> {
    population_weights(open(path)?, settings.age_support).with_context(|| format!("reading {}", path.display()))
}

fn read_cases(path: &Path) -> Result<Vec<CountryCaseCount>> {
    load_case_counts(open(path)?).with_context(|| format!("reading {}", path.display()))
}

pub struct FitArgs {
    pub records: PathBuf,
    pub population: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub ceiling_likelihood: bool,
}

pub fn fit(args: &FitArgs, settings: &Settings) -> Result<Outcome> {
    let likelihood = if args.ceiling_likelihood { Likelihood::Ceiled } else { Likelihood::Continuous };
    let records = read_records(
        &args.records,
        settings,
        LoadOptions { continuous_z: !args.ceiling_likelihood, allow_missing_z: false, ..LoadOptions::default() },
    )?;
    let population = args.population.as_deref().map(|p| read_population(p, settings)).transpose()?;
    let cases = args.cases.as_deref().map(read_cases).transpose()?;
    let options = workflow_options(settings, likelihood);
    let inputs = fit_inputs(&records, population.as_ref(), cases.as_deref(), &options)?;

    let dir = &settings.out_dir;
    write_json(&in_dir(dir, FIT_REPORT), &inputs.report)?;
    write_atomic(&in_dir(dir, F1_DENSITY), |w| inputs.f1.write_csv(w))?;
    write_atomic(&in_dir(dir, F0_DENSITY), |w| inputs.f0.write_csv(w))?;
    let infected: Vec<QuarantineRecord> = records.iter().filter(|r| r.infected).copied().collect();
    write_atomic(&in_dir(dir, INFECTED), |w| write_records(&infected, w))?;
    if likelihood == Likelihood::Ceiled {
        let obs: Vec<Observation> = infected.iter().map(|r| Observation::new(r.age as f64, r.z.unwrap_or(1.0))).collect();
        let table = interval_fit_table(&inputs.report.model, &obs)?;
        write_atomic(&in_dir(dir, INTERVAL_FIT), |w| {
            let mut wtr = csv::Writer::from_writer(w);
            for row in &table {
                wtr.serialize(row)?;
            }
            wtr.flush()?;
            Ok(())
        })?;
    }

    let report = &inputs.report;
    for p in &report.parameters {
        match p.standard_error {
            Some(se) => println!("{:<16} {:>12.6} ({:.6})", p.name, p.estimate, se),
            None => println!("{:<16} {:>12.6}", p.name, p.estimate),
        }
    }
    if !report.converged {
        eprintln!("warning: fit did not converge after {} iterations", report.iterations);
        return Ok(Outcome::NotConverged);
    }
    Ok(Outcome::Success)
}

fn load_fit_dir(dir: &Path, settings: &Settings) -> Result<FittedInputs> {
    let report: FitReport = serde_json::from_reader(open(&in_dir(dir, FIT_REPORT))?)
        .with_context(|| format!("parsing {}", in_dir(dir, FIT_REPORT).display()))?;
    let f1 = DensityEstimate::read_csv(open(&in_dir(dir, F1_DENSITY))?)?;
    let f0 = DensityEstimate::read_csv(open(&in_dir(dir, F0_DENSITY))?)?;
    let continuous = report.likelihood == Likelihood::Continuous;
    let records = read_records(
        &in_dir(dir, INFECTED),
        settings,
        LoadOptions { continuous_z: continuous, ..LoadOptions::default() },
    )?;
    Ok(FittedInputs { report, f1, f0, infected: infected_with_times(&records) })
}

#[derive(Deserialize)]
struct WeightRow {
    risk_level: RiskLevel,
    age: u32,
    weight: f64,
}

fn read_weights(path: &Path) -> Result<BTreeMap<FeaturePoint, f64>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = BTreeMap::new();
    for (k, row) in rdr.deserialize::<WeightRow>().enumerate() {
        let row = row.map_err(|e| quarantine_core::Error::Schema { line: k + 2, message: e.to_string() })?;
        out.insert(FeaturePoint::new(row.risk_level, row.age), row.weight);
    }
    if out.is_empty() {
        return Err(quarantine_core::Error::Schema { line: 1, message: "weight file has no rows".into() }.into());
    }
    Ok(out)
}

pub struct SolveArgs {
    pub fit_dir: PathBuf,
    pub weights: Option<PathBuf>,
    pub impute_records: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub cases: Option<PathBuf>,
    pub imputations: usize,
}

#[derive(Serialize)]
struct SolutionFile<'a> {
    epsilon: f64,
    y_max: f64,
    weighted: bool,
    solution: &'a ThresholdSolution,
    /// One solution per completed dataset when imputing.
    #[serde(skip_serializing_if = "Option::is_none")]
    imputed_solutions: Option<&'a [ThresholdSolution]>,
}

fn write_rules(dir: &Path, rules: &RuleSet) -> Result<()> {
    for (label, rule) in rules.iter() {
        write_atomic(&in_dir(dir, &format!("rule_{label}.csv")), |w| rule.write_csv(w))?;
    }
    Ok(())
}

fn print_reports(reports: &[EvaluationReport]) {
    for r in reports {
        println!("{:<22} AQD {:>6.2}  EP {:>5.1}%", r.method, r.aqd, 100.0 * r.ep);
    }
}

pub fn solve(args: &SolveArgs, settings: &Settings) -> Result<Outcome> {
    let inputs = load_fit_dir(&args.fit_dir, settings)?;
    let weights = args.weights.as_deref().map(read_weights).transpose()?;
    let options = workflow_options(settings, inputs.report.likelihood);
    let dir = &settings.out_dir;

    let (rules, imputed) = match &args.impute_records {
        Some(path) => {
            let records = read_records(path, settings, LoadOptions { allow_missing_z: true, ..LoadOptions::default() })?;
            let population = args
                .population
                .as_deref()
                .map(|p| read_population(p, settings))
                .transpose()?;
            let cases = args.cases.as_deref().map(read_cases).transpose()?;
            let analysis = imputed_analysis(
                &records,
                &inputs.report.model,
                population.as_ref(),
                cases.as_deref(),
                settings.epsilon,
                args.imputations,
                settings.seed,
                weights.as_ref(),
                &options,
            )?;
            write_atomic(&in_dir(dir, F1_DENSITY), |w| analysis.f1.write_csv(w))?;
            write_atomic(&in_dir(dir, F0_DENSITY), |w| analysis.f0.write_csv(w))?;
            write_atomic(&in_dir(dir, EVALUATION), |w| write_reports_csv(&analysis.reports, w))?;
            print_reports(&analysis.reports);
            (analysis.rules, Some(analysis.solutions))
        }
        None => {
            let rules = solve_rules(&inputs, settings.epsilon, weights.as_ref(), &options)?;
            let reports = evaluate_rules(&rules, &inputs.f0, &inputs.infected, settings.round)?;
            write_atomic(&in_dir(dir, EVALUATION), |w| write_reports_csv(&reports, w))?;
            print_reports(&reports);
            (rules, None)
        }
    };
    write_rules(dir, &rules)?;
    let solution = &rules.solution;
    write_json(
        &in_dir(dir, SOLUTION),
        &SolutionFile {
            epsilon: settings.epsilon,
            y_max: settings.y_max,
            weighted: weights.is_some(),
            solution,
            imputed_solutions: imputed.as_deref(),
        },
    )?;
    println!(
        "c0 {:.6e}  c* {:.6e}  escape {:.4}{}",
        solution.c0,
        solution.c_star,
        solution.achieved_escape,
        if solution.fallback_used { "  (fallback: c0 = c*)" } else { "" }
    );
    let support = rules.optimal.durations.len().max(1) as f64;
    let violations = imputed
        .as_ref()
        .map(|all| all.iter().map(|s| s.condition_violations.len()).max().unwrap_or(0))
        .unwrap_or(solution.condition_violations.len());
    if violations as f64 / support > settings.max_violation_fraction {
        eprintln!("warning: {violations} feature point(s) have a multimodal ratio curve");
        return Ok(Outcome::ConditionViolations);
    }
    Ok(Outcome::Success)
}

pub struct EvaluateArgs {
    pub rules: Vec<String>,
    pub records: PathBuf,
    pub f0: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub cases: Option<PathBuf>,
}

fn parse_rule_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) => (label.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("rule");
            (stem.strip_prefix("rule_").unwrap_or(stem).to_string(), path)
        }
    }
}

pub fn evaluate(args: &EvaluateArgs, settings: &Settings) -> Result<Outcome> {
    if args.rules.is_empty() {
        bail!("at least one --rule is required");
    }
    let rules = args
        .rules
        .iter()
        .map(|arg| {
            let (label, path) = parse_rule_arg(arg);
            let rule = QuarantineRule::read_csv(open(&path)?, RuleProvenance::Custom { label: label.clone() })
                .with_context(|| format!("reading {}", path.display()))?;
            Ok((label, rule))
        })
        .collect::<Result<Vec<_>>>()?;
    let has_levels = rules.iter().any(|(_, r)| r.durations.keys().any(|x| x.risk_level != RiskLevel::None));
    let f0 = match (&args.f0, &args.population) {
        (Some(path), _) => DensityEstimate::read_csv(open(path)?)?,
        (None, Some(path)) => {
            let pop = read_population(path, settings)?;
            if has_levels {
                let cases = args.cases.as_deref().context("rules carry risk levels: --cases is required with --population")?;
                let levels: BTreeMap<RiskLevel, f64> = population_shares(&read_cases(cases)?)?;
                pop.crossed_with_levels(&levels)?
            } else {
                pop
            }
        }
        (None, None) => bail!("one of --f0 or --population is required"),
    };
    let records = read_records(&args.records, settings, LoadOptions { continuous_z: true, ..LoadOptions::default() })?;
    let infected = infected_with_times(&records);
    let reports = rules
        .iter()
        .map(|(label, rule)| EvaluationReport::evaluate(label.as_str(), rule, &f0, &infected, settings.round))
        .collect::<quarantine_core::Result<Vec<_>>>()?;
    write_atomic(&in_dir(&settings.out_dir, EVALUATION), |w| write_reports_csv(&reports, w))?;
    print_reports(&reports);
    Ok(Outcome::Success)
}

pub struct SimulateArgs {
    pub scenario: u8,
    pub n: usize,
    pub reps: usize,
    pub likelihood: Likelihood,
}

pub fn simulate(args: &SimulateArgs, settings: &Settings) -> Result<Outcome> {
    let spec = ScenarioSpec::new(args.scenario)?;
    let options = PipelineOptions {
        likelihood: args.likelihood,
        bandwidth: settings.bandwidth,
        y_max: settings.y_max,
        round: settings.round,
        ..PipelineOptions::default()
    };
    let summary = run_replications(&spec, args.n, settings.epsilon, args.reps, settings.seed, &options)?;
    // The truth-based rule is only meaningful where the ratio curves are unimodal.
    let theoretical = if spec.id == 4 { None } else { Some(theoretical_optimum(&spec, settings.epsilon, settings.y_max)?.0) };
    let dir = &settings.out_dir;
    let stem = format!("scenario{}", spec.id);
    write_atomic(&in_dir(dir, &format!("{stem}_table.csv")), |w| summary.write_table_csv(w))?;
    write_atomic(&in_dir(dir, &format!("{stem}_durations.csv")), |w| summary.write_durations_csv(theoretical.as_ref(), w))?;
    for row in &summary.rows {
        println!(
            "scenario {}  {:<22} AQD {:>6.2} ({:.2})  EP {:>5.2}% ({:.2})",
            row.scenario,
            row.method,
            row.aqd,
            row.aqd_se,
            100.0 * row.ep,
            100.0 * row.ep_se
        );
    }
    if !summary.failures.is_empty() {
        eprintln!("warning: {} of {} replications failed", summary.failures.len(), args.reps);
    }
    Ok(Outcome::Success)
}

pub struct ExportCurveArgs {
    pub fit_dir: PathBuf,
    pub age: u32,
    pub risk_level: RiskLevel,
    pub points: usize,
    pub rules_dir: Option<PathBuf>,
}

pub fn export_curve(args: &ExportCurveArgs, settings: &Settings) -> Result<Outcome> {
    let inputs = load_fit_dir(&args.fit_dir, settings)?;
    let x = FeaturePoint::new(args.risk_level, args.age);
    let model = inputs.report.model;
    let curve = ratio_curve(x, &model, &inputs.f1, &inputs.f0, settings.y_max)?;
    if args.points < 2 {
        bail!("--points must be at least 2");
    }
    let name = format!("ratio_curve_{}_{}.csv", args.risk_level, args.age);
    write_atomic(&in_dir(&settings.out_dir, &name), |w| {
        writeln!(w, "y,ratio")?;
        for k in 1..=args.points {
            let y = settings.y_max * k as f64 / args.points as f64;
            writeln!(w, "{y},{}", curve.value(y))?;
        }
        Ok(())
    })?;
    println!("mode {:.4} days, peak {:.6e}", curve.mode(), curve.peak());

    if let Some(dir) = &args.rules_dir {
        let labels = ["quantile", "conditional_quantile", "optimal"];
        let rules = labels
            .iter()
            .map(|l| {
                let path = in_dir(dir, &format!("rule_{l}.csv"));
                QuarantineRule::read_csv(open(&path)?, RuleProvenance::Custom { label: l.to_string() })
                    .with_context(|| format!("reading {}", path.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        write_atomic(&in_dir(&settings.out_dir, "durations_by_age.csv"), |w| {
            writeln!(w, "risk_level,age,{}", labels.join(","))?;
            for x in rules[0].durations.keys() {
                let row = rules.iter().map(|r| r.duration(x).map(|d| d.to_string())).collect::<quarantine_core::Result<Vec<_>>>()?;
                writeln!(w, "{},{},{}", x.risk_level, x.age, row.join(","))?;
            }
            Ok(())
        })?;
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Infected records with ages and ceiled incubation times, plus a population table.
    Age,
    /// Infected records with risk levels and missing incubation times, plus population and case tables.
    Risk,
}

pub struct SynthArgs {
    pub kind: SynthKind,
    pub n: Option<usize>,
}

pub fn synth(args: &SynthArgs, settings: &Settings) -> Result<Outcome> {
    let dir = &settings.out_dir;
    let records = match args.kind {
        SynthKind::Age => fixtures::age_records(args.n.unwrap_or(1770), settings.seed),
        SynthKind::Risk => fixtures::risk_records(args.n.unwrap_or(5008), settings.seed),
    };
    write_atomic(&in_dir(dir, "records.csv"), |w| write_records(&records, w))?;
    write_atomic(&in_dir(dir, "population.csv"), |w| write_population(&fixtures::population(), w))?;
    if args.kind == SynthKind::Risk {
        write_atomic(&in_dir(dir, "cases.csv"), |w| write_case_counts(&fixtures::case_counts(), w))?;
    }
    println!("wrote {} records to {}", records.len(), dir.display());
    Ok(Outcome::Success)
}
