use std::path::PathBuf;

/// Errors surfaced by scenario generation, evaluation and the experiment layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("placement failed after {retries} retries for {what}")]
    Placement { what: String, retries: usize },

    #[error("inconsistent association/allocation at {0:?}")]
    Inconsistent(Vec<Entry>),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("bisection did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// An offending `(sbs, device, file)` triple reported by consistency checks.
/// `file` is `None` for CSD entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub sbs: usize,
    pub device: usize,
    pub file: Option<usize>,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
