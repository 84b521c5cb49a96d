//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("curves do not share a grid")]
    IncompatibleGrid,

    /// The tangent basis failed the linear-independence check: Cholesky
    /// broke down or the Gram condition estimate exceeded 1e12.
    #[error("degenerate tangent basis (condition estimate {cond:.3e})")]
    DegenerateBasis { cond: f64 },

    #[error("coordinates left the parameter space{}", fmt_step(.step))]
    OutOfDomain { step: Option<usize> },

    #[error("non-finite values encountered at step {step}")]
    NumericalBlowup { step: usize },

    #[error("curve fit did not converge after {iters} iterations (best residual norm {residual_norm:.3e})")]
    FitFailed {
        iters: usize,
        best: Vec<f64>,
        residual_norm: f64,
    },

    #[error("theta lies outside the admissible parameter box")]
    InvalidTheta,

    #[error("weighting matrix is singular even after regularization")]
    SingularWeighting,

    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },

    #[error("config {path}:{line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_step(step: &Option<usize>) -> String {
    match step {
        Some(k) => format!(" at step {k}"),
        None => String::new(),
    }
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
