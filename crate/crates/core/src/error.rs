use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv {path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error("non-numeric value {value:?} at row {row}, column {column:?} of {path}")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },
    #[error("target column {0:?} not found")]
    MissingTarget(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular Gram matrix for dataset {id:?} (reciprocal condition number {rcond:.3e})")]
    Singular { id: String, rcond: f64 },
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("Monte Carlo noise too large: {0}")]
    MonteCarloNoise(String),
    #[error("internal consistency violated: {0}")]
    Consistency(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error("rejection sampling gave up after {0} attempts")]
    Infeasible(usize),
    #[error("every trial failed at alpha = {0}")]
    AllTrialsFailed(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
