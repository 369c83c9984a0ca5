use thiserror::Error;

use crate::density::FeaturePoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// f0 vanishes at a support point, so the density ratio is undefined there.
    #[error("uninfected feature density is zero at {0}")]
    ZeroDensity(FeaturePoint),

    /// f1 vanishes at a support point, so the ratio curve has zero peak.
    #[error("infected feature density is zero at {0}; every threshold would empty its superlevel set")]
    VanishingInfectedDensity(FeaturePoint),

    #[error("nonpositive incubation scale {scale} at age {age}")]
    NonPositiveScale { age: f64, scale: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("observed information is singular: {0}")]
    SingularInformation(String),

    #[error("no value defined for feature point {0}")]
    SupportMismatch(FeaturePoint),

    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn schema(line: usize, message: impl Into<String>) -> Self {
        Error::Schema {
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by malformed input files.
    pub fn is_schema(&self) -> bool {
        matches!(self, Error::Schema { .. } | Error::Csv(_) | Error::Json(_))
    }
}
