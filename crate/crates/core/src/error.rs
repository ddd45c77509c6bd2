use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("stability error: dt = {dt:e} exceeds stable limit {limit:e}")]
    Stability { dt: f64, limit: f64 },

    #[error("solver diverged at t = {time:e}: non-finite value in cell {cell}")]
    SolverDivergence { cell: usize, time: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("rollout diverged at step {step}")]
    RolloutDivergence { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stability { .. } | Error::SolverDivergence { .. } => 3,
            Error::FitFailure(_) => 4,
            Error::RolloutDivergence { .. } => 5,
            _ => 2,
        }
    }
}
