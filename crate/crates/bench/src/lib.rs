//! Inputs shared by the benchmarks.

use quarantine_core::data_pipeline::{fit_inputs, fixtures, FittedInputs, WorkflowOptions};
use quarantine_core::{FeaturePoint, Observation};

/// The 1770-record age fixture, fitted once.
pub fn fitted_age_fixture(seed: u64) -> FittedInputs {
    let records = fixtures::age_records(1770, seed);
    fit_inputs(&records, Some(&fixtures::population()), None, &WorkflowOptions::default())
        .expect("fixture fits")
}

/// Ceiled incubation observations from the age fixture.
pub fn age_observations(n: usize, seed: u64) -> Vec<Observation> {
    fixtures::age_records(n, seed)
        .iter()
        .map(|r| Observation::new(r.age as f64, r.z.expect("fixture records carry z")))
        .collect()
}

/// Infected ages from the age fixture.
pub fn infected_ages(n: usize, seed: u64) -> Vec<FeaturePoint> {
    fixtures::age_records(n, seed).iter().map(|r| r.feature()).collect()
}
