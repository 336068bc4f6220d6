use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("granularity {ell} exceeds the binary maximum {max} for vocabulary size {vocab}")]
    GranularityTooLarge { ell: usize, max: usize, vocab: usize },
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabTooSmall(usize),
    #[error("granularity must be at least 1")]
    ZeroGranularity,
    #[error("token counts are empty (no positive entry)")]
    EmptyCounts,
    #[error("expected {expected} counts, got {got}")]
    CountsLength { expected: usize, got: usize },
    #[error("token id {token} out of range for vocabulary size {vocab}{}", position.map(|p| format!(" at position {p}")).unwrap_or_default())]
    TokenOutOfRange { token: usize, vocab: usize, position: Option<usize> },
    #[error("sub-token code {0:?} does not decode to a token")]
    InvalidCode(Vec<usize>),
    #[error("incompatible bases: {from} cannot be split into digits of base {to}")]
    IncompatibleBases { from: usize, to: usize },
    #[error("corrupt subtokenizer file: {0}")]
    CorruptFile(String),
    #[error("time {0} is outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("reverse step requires s < t, got s = {s}, t = {t}")]
    TimeOrderError { s: f64, t: f64 },
    #[error("posterior draw contradicts unmasked cell ({row}, {col})")]
    CarryOverViolation { row: usize, col: usize },
    #[error("posterior emitted {got} values for a cell with {expected} categories")]
    PosteriorShapeError { expected: usize, got: usize },
    #[error("grid shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("enumeration needs {needed} states, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("NELBO routes disagree: decomposition {a}, posterior {b}")]
    RouteMismatch { a: f64, b: f64 },
    #[error("distribution is not normalized (sum = {0})")]
    NotNormalized(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("insufficient data for a scaling fit: {0}")]
    InsufficientData(String),
    #[error("degenerate scaling fit: {0} hit its bound")]
    DegenerateFit(String),
    #[error("invalid scaling point: {0}")]
    InvalidPoint(String),
    #[error("training diverged at step {0}")]
    DivergenceDetected(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is zero")]
    ZeroMatrix,
    #[error("matrix shape is invalid: {0}")]
    BadMatrix(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
