use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("matrix is not symmetric")]
    Asymmetric,

    #[error("matrix is not positive semi-definite")]
    NotPsd,

    #[error("information matrix is not positive definite")]
    NotPd,

    #[error("graph was modified since the last optimization")]
    StaleGraph,

    #[error("no path exists between the requested cells")]
    NoPath,

    #[error("candidate set is empty")]
    EmptyCandidates,

    #[error("point outside map bounds: ({0}, {1})")]
    OutOfBounds(f64, f64),

    #[error("mission aborted: {0}")]
    MissionAbort(String),

    #[error("nothing to plot")]
    NothingToPlot,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
