//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid data for patient {patient}: {message}")]
    PatientInvalid { patient: String, message: String },

    #[error("invalid dataset: {0}")]
    DatasetInvalid(String),

    #[error("unknown covariate `{0}` (not in dataset schema)")]
    UnknownCovariate(String),

    #[error("invalid feature term `{term}`: {message}")]
    BadTerm { term: String, message: String },

    #[error("feature `{feature}` is not computable at month {month} for patient {patient}")]
    MissingFeature {
        feature: String,
        month: i32,
        patient: String,
    },

    #[error("empty risk set: {0}")]
    EmptyRiskSet(String),

    #[error("logistic fit did not converge; suspected separation or degeneracy in feature `{feature}` (max |coef| = {magnitude:.2} after {iterations} iterations)")]
    Separation {
        feature: String,
        magnitude: f64,
        iterations: usize,
    },

    #[error("rank-deficient regression design; collinear features: {}", features.join(", "))]
    RankDeficient { features: Vec<String> },

    #[error("censoring survival probability {probability:.6} below positivity floor {floor}; weights are only valid when the censoring hazard is bounded away from one")]
    PositivityViolation { probability: f64, floor: f64 },

    #[error("unidentified: estimating-equation matrix singular (rcond = {rcond:.3e})")]
    SingularSystem { rcond: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{failed} of {total} bootstrap replicates failed (> {limit_percent}% limit); failure census: {census}")]
    BootstrapFailures {
        failed: usize,
        total: usize,
        limit_percent: u32,
        census: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("estimation stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
