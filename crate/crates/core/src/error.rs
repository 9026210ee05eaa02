use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("simulation error on path {path} at step {step}: {msg}")]
    Simulation {
        path: usize,
        step: usize,
        msg: String,
    },
    #[error("degeneracy: {0}")]
    Degeneracy(String),
    #[error("estimator error at step {step}: {msg}")]
    Estimator { step: usize, msg: String },
    #[error("convergence error: {0}")]
    Convergence(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit status used by the command line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }

    /// Short name of the subsystem that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) | Error::Usage(_) => "api",
            Error::Simulation { .. } => "forward",
            Error::Degeneracy(_) => "adjoint_mall",
            Error::Estimator { .. } => "regression",
            Error::Convergence(_) => "solver",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
