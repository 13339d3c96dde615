//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input failed basic validation.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Non-finite value produced inside an RK4 stage (k1..k4).
    #[error("integration overflow at stage {stage} (t = {t})")]
    IntegrationOverflow { stage: &'static str, t: f64 },

    /// Trajectory exceeded the divergence bound during integration.
    #[error("trajectory diverged: |value| > {bound:e} after index {last_valid}")]
    TruncatedTrajectory { last_valid: usize, bound: f64 },

    /// Step length is not an even multiple of the sampling interval.
    #[error("step length h = {h} requires s = h/(2*delta) to be a positive integer; got s = {s_raw} (delta = {delta})")]
    StepAlignment { h: f64, delta: f64, s_raw: f64 },

    /// Not enough rows to form a single design triplet.
    #[error("insufficient data: need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// A named matrix is singular or too ill-conditioned to invert.
    #[error("{matrix} is rank deficient (condition estimate {cond:.3e} exceeds cap {cap:.1e})")]
    RankDeficient { matrix: &'static str, cond: f64, cap: f64 },

    /// The inner matrix of a submodel projection is singular.
    #[error("submodel with auxiliary indices {indices:?} is collinear")]
    SubmodelCollinear { indices: Vec<usize> },

    /// A submodel residual variance is non-positive.
    #[error("submodel {index} has non-positive residual variance {value}")]
    NonpositiveVariance { index: usize, value: f64 },

    /// Dimension mismatch between related quantities.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// No (a, b, c) candidate satisfied the D0 weight-mass constraint.
    #[error("no feasible weight parameters: tightest unbiased mass {tightest:.6} > allowed {allowed:.6}")]
    Infeasible { tightest: f64, allowed: f64 },

    /// A data column is constant and cannot be standardized.
    #[error("column {column} has zero variance")]
    ZeroVariance { column: String },

    /// CSV ingestion failure with location detail.
    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion { row: usize, column: String, message: String },

    /// Too many replications failed numerically for the run to be trusted.
    #[error("monte carlo aborted: {failed} of {total} replications failed numerically")]
    MonteCarloFailures { failed: usize, total: usize },

    /// A diagnostic needs inputs that are not available.
    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    /// R-squared is undefined because the response has zero total variation.
    #[error("goodness of fit undefined: zero total sum of squares")]
    UndefinedR2,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Process exit code per the CLI contract: 2 for usage/config/ingestion
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::Ingestion { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::DiagnosticUnavailable(_) => 2,
            _ => 3,
        }
    }
}
