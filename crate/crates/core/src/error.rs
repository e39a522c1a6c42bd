use std::fmt;

/// Byte range into the source text of an expression or config value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error at {span}: {message}")]
    Parse { span: Span, message: String },

    #[error("evaluation error in `{source_text}`: {message}")]
    Eval { source_text: String, message: String },

    #[error(
        "commensurability violated: M = {m} must equal P * n with P = 1/eps integer (n = {n}, P = {p})"
    )]
    Commensurability { m: usize, n: usize, p: f64 },

    #[error("H1 violated: {message} (z = {z:?}, z' = {zp:?}, value = {value})")]
    H1Violation {
        message: String,
        z: [f64; 3],
        zp: [f64; 3],
        value: f64,
    },

    #[error("H4 violated at xi = {xi:?}: rho = 0 but |nu| = {nu_norm}")]
    H4Violation { xi: [f64; 3], nu_norm: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("conjugate gradients stopped after {iterations} iterations at relative residual {residual:e}")]
    Convergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("non-positive curvature {curvature:e} at CG iteration {iteration} (assembly bug)")]
    NonPositiveCurvature { iteration: usize, curvature: f64 },

    #[error("inverse power iteration stagnated after {iterations} iterations (last change {change:e})")]
    Stagnation { iterations: usize, change: f64 },

    #[error("recovery step too large: |m0 + eps*phi| = {norm} < 1/2 at node {node:?}")]
    StepSize { node: [usize; 3], norm: f64 },

    #[error("malformed field dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
