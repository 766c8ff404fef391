use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("response {value} at cell ({row}, {col}) is outside the support of the {family} family")]
    Domain {
        row: usize,
        col: usize,
        value: f64,
        family: &'static str,
    },
    #[error("value {value} is outside the support of the {family} family")]
    Support { value: f64, family: &'static str },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("no observed cells")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular matrix in {what} (index {index})")]
    Singular { what: &'static str, index: usize },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("all {0} random starts failed")]
    AllStartsFailed(usize),
    #[error("{failures} of {total} replications failed")]
    StudyFailed { failures: usize, total: usize },
    #[error("zero variance: {0}")]
    ZeroVariance(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain { .. }
            | Error::Support { .. }
            | Error::Dimension(_)
            | Error::Index(_)
            | Error::EmptyMask
            | Error::Config(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}
