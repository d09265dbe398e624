use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("load error at line {line}: {msg}")]
    Load { line: usize, msg: String },

    #[error("assembly error in element {element}: {msg}")]
    Assembly { element: usize, msg: String },

    #[error("linear solver failed at step {step}: relative residual {residual:e} after {iterations} iterations")]
    Solve {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("degenerate DEIM basis: |rho| = {rho:e} at mode {mode}")]
    DegenerateBasis { mode: usize, rho: f64 },

    #[error("archive format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
