mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use quarantine_core::{Bandwidth, Likelihood, RiskLevel};

use commands::{EvaluateArgs, ExportCurveArgs, FitArgs, Outcome, SimulateArgs, SolveArgs, SynthArgs, SynthKind};
use config::{Overrides, Settings};

/// Individualized quarantine durations: fit incubation and feature models,
/// solve for the shortest rule meeting an escape-probability target, and
/// compare it against quantile baselines.
#[derive(Parser, Debug)]
#[command(name = "quarantine", version, about)]
#[command(after_help = "EXIT CODES:\n  \
    0  success\n  \
    1  invalid input or failed computation\n  \
    2  incubation fit did not converge (outputs still written)\n  \
    3  too many feature points with a multimodal ratio curve (outputs still written)\n  \
    64 command-line usage error")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config with any of: age_min, age_max, y_max, epsilon, bandwidth,
    /// round, seed, max_violation_fraction
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random draw
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Target escape probability
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    /// Longest duration considered, in days
    #[arg(long, global = true)]
    y_max: Option<f64>,

    /// Round durations to whole days when evaluating (default)
    #[arg(long, global = true, action = ArgAction::SetTrue, overrides_with = "no_round")]
    round: bool,

    /// Evaluate fractional durations as they are
    #[arg(long, global = true, action = ArgAction::SetTrue, overrides_with = "round")]
    no_round: bool,

    /// Directory for output files
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Kernel bandwidth in years, or `auto` for cross-validation
    #[arg(long, global = true)]
    bandwidth: Option<Bandwidth>,

    /// Smallest age in the feature support
    #[arg(long, global = true)]
    age_min: Option<u32>,

    /// Largest age in the feature support
    #[arg(long, global = true)]
    age_max: Option<u32>,

    /// Log progress to stderr (repeat for more detail)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LikelihoodArg {
    Ceiled,
    Continuous,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the conditional incubation model and both feature densities
    Fit {
        /// records.csv with columns age,risk_level,infected,z
        #[arg(long)]
        records: PathBuf,
        /// population.csv (age,weight) for the uninfected feature law; without
        /// it the uninfected records are used
        #[arg(long)]
        population: Option<PathBuf>,
        /// cases.csv (country,new_cases_14d,population) for risk-level shares
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Interval likelihood for whole-day incubation times; `off` fits exact times
        #[arg(long, value_enum, default_value = "on")]
        ceiling_likelihood: Switch,
    },
    /// Solve for the optimal rule and the quantile baselines from a fit directory
    Solve {
        /// Directory written by `fit`
        #[arg(long)]
        fit_dir: PathBuf,
        /// Cost weights per feature point (risk_level,age,weight)
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Records with missing incubation times to complete by multiple imputation
        #[arg(long)]
        impute_records: Option<PathBuf>,
        /// Population table used with --impute-records
        #[arg(long)]
        population: Option<PathBuf>,
        /// Case table used with --impute-records
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Number of completed datasets
        #[arg(long, default_value_t = 10)]
        imputations: usize,
    },
    /// Average quarantine duration and escape probability of rule files
    Evaluate {
        /// Rule CSV, optionally as LABEL=PATH; repeatable
        #[arg(long = "rule", required = true)]
        rules: Vec<String>,
        /// Records whose infected rows give the escape probability
        #[arg(long)]
        records: PathBuf,
        /// Uninfected feature density CSV (risk_level,age,weight)
        #[arg(long, conflicts_with = "population")]
        f0: Option<PathBuf>,
        /// Population table (age,weight)
        #[arg(long)]
        population: Option<PathBuf>,
        /// Case table to split the population by risk level
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// Run the simulation study for one scenario
    Simulate {
        /// Scenario 1 to 4
        #[arg(long, default_value_t = 1)]
        scenario: u8,
        /// Individuals per simulated dataset
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Number of replications
        #[arg(long, default_value_t = 200)]
        reps: usize,
        /// Likelihood used by the working-model fit
        #[arg(long, value_enum, default_value = "ceiled")]
        likelihood: LikelihoodArg,
    },
    /// Export the density-ratio curve at one feature point, and optionally
    /// durations by age from rule files
    ExportCurve {
        /// Directory written by `fit`
        #[arg(long)]
        fit_dir: PathBuf,
        #[arg(long)]
        age: u32,
        #[arg(long, default_value = "none")]
        risk_level: RiskLevel,
        /// Grid points on (0, y_max]
        #[arg(long, default_value_t = 600)]
        points: usize,
        /// Directory with rule_quantile.csv, rule_conditional_quantile.csv and rule_optimal.csv
        #[arg(long)]
        rules_dir: Option<PathBuf>,
    },
    /// Write synthetic input files shaped like the real datasets
    Synth {
        #[arg(long, value_enum, default_value = "age")]
        kind: SynthKind,
        /// Number of records (default 1770 for `age`, 5008 for `risk`)
        #[arg(long)]
        n: Option<usize>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let overrides = Overrides {
        seed: cli.seed,
        epsilon: cli.epsilon,
        y_max: cli.y_max,
        round: if cli.no_round { Some(false) } else if cli.round { Some(true) } else { None },
        bandwidth: cli.bandwidth,
        age_min: cli.age_min,
        age_max: cli.age_max,
    };
    let settings = Settings::resolve(cli.config.as_deref(), &overrides, cli.out_dir)?;
    match cli.command {
        Command::Fit { records, population, cases, ceiling_likelihood } => commands::fit(
            &FitArgs { records, population, cases, ceiling_likelihood: ceiling_likelihood == Switch::On },
            &settings,
        ),
        Command::Solve { fit_dir, weights, impute_records, population, cases, imputations } => commands::solve(
            &SolveArgs { fit_dir, weights, impute_records, population, cases, imputations },
            &settings,
        ),
        Command::Evaluate { rules, records, f0, population, cases } => {
            commands::evaluate(&EvaluateArgs { rules, records, f0, population, cases }, &settings)
        }
        Command::Simulate { scenario, n, reps, likelihood } => {
            let likelihood = match likelihood {
                LikelihoodArg::Ceiled => Likelihood::Ceiled,
                LikelihoodArg::Continuous => Likelihood::Continuous,
            };
            commands::simulate(&SimulateArgs { scenario, n, reps, likelihood }, &settings)
        }
        Command::ExportCurve { fit_dir, age, risk_level, points, rules_dir } => {
            commands::export_curve(&ExportCurveArgs { fit_dir, age, risk_level, points, rules_dir }, &settings)
        }
        Command::Synth { kind, n } => commands::synth(&SynthArgs { kind, n }, &settings),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Ok(Outcome::ConditionViolations) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
