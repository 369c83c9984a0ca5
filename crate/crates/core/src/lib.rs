//! Individualized optimal quarantine durations.
//!
//! The optimal rule assigns to each feature point the right end of the
//! superlevel set of the density-ratio curve `y ↦ f1(y|x)·f1(x)/f0(x)`, with
//! the level `c0` chosen so the escape probability of infected people equals
//! a target `ε`.

pub mod baselines;
pub mod data_pipeline;
pub mod density;
pub mod distributions;
pub mod error;
pub mod incubation;
pub mod numeric;
pub mod rule_solver;
pub mod simulation;

pub use baselines::{EvaluationReport, ReproductionNumber};
pub use data_pipeline::{CountryCaseCount, QuarantineRecord};
pub use density::{AgeSupport, Bandwidth, DensityEstimate, FeaturePoint, RiskLevel};
pub use error::{Error, Result};
pub use incubation::{ConditionalIncubationModel, FitOptions, FitReport, Likelihood, Observation};
pub use rule_solver::{ConditionalLaw, QuarantineRule, RatioCurve, RatioCurves, RuleProvenance, ThresholdSolution};
