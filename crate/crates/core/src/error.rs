use std::path::PathBuf;

use thiserror::Error;

use crate::xstep::XStepResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("autocovariance input rejected: {0}")]
    NonPsdInput(String),

    #[error("invalid parameter: {0}")]
    BadParam(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-positive price {value} at row {row}, column {column} ({asset})")]
    NonPositivePrice {
        row: usize,
        column: usize,
        asset: String,
        value: f64,
    },

    #[error("return horizon {tau} must be smaller than the number of observations {len}")]
    TauTooLarge { tau: usize, len: usize },

    #[error("series too short: need at least {needed} observations, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("A0 is not positive definite")]
    A0NotPd,

    #[error("x-step quadratic is not bounded below on the feasible set (min generalized eigenvalue {min_gen_eig:.3e} <= 0)")]
    XStepUnbounded { min_gen_eig: f64 },

    #[error("x-step secular bisection did not converge")]
    XStepNonconvergence(Box<XStepResult>),

    #[error("z-step system is not positive definite")]
    ZStepIndefinite,

    #[error("cannot sparsify or normalize a zero vector")]
    ZeroVector,

    #[error("no feasible point with volatility >= {phi:.6e}; best volatility found {best_volatility:.6e} (largest feasible phi suggestion)")]
    NoFeasiblePoint { phi: f64, best_volatility: f64 },

    #[error("nonconvex mode requires rho0 > |lambda_max(A0) - alpha*lambda_min(A1)| = {bound:.6e}, got rho0 = {rho0:.6e}")]
    RhoBelowBound { rho0: f64, bound: f64 },

    #[error("vector has nonzero entries outside the given support")]
    BadSupport,

    #[error("spread has zero volatility; cannot normalize")]
    ZeroVolatilitySpread,

    #[error("return series has zero variance on the window")]
    ZeroVariance,

    #[error("degenerate Dickey-Fuller regression")]
    DegenerateRegression,

    #[error("invalid window [{start}, {end}) for a series of length {len}")]
    BadWindow { start: usize, end: usize, len: usize },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::XStepNonconvergence(_) => 3,
            Error::NoFeasiblePoint { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
