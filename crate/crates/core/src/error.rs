use thiserror::Error;

/// Errors surfaced by the grid model, solvers, controllers, and file loaders.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("cycle detected: line ({from}, {to}) closes a loop")]
    CycleDetected { from: usize, to: usize },
    #[error("bus {bus} is not connected to the substation")]
    DisconnectedBus { bus: usize },
    #[error("duplicate line between buses {a} and {b}")]
    DuplicateLine { a: usize, b: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("problem too large for exhaustive enumeration: {n} > {max}")]
    ProblemTooLarge { n: usize, max: usize },
    #[error("state infeasible: q outside capacity box by {violation:e} at index {index}")]
    InfeasibleState { index: usize, violation: f64 },
    #[error("reference voltage outside the deadband at bus index {index}: v* = {v_star}")]
    DegenerateReference { index: usize, v_star: f64 },
    #[error("reactance matrix is singular")]
    SingularX,
    #[error("safety assertion fired: q[{index}] = {value} outside [{lo}, {hi}]")]
    SafetyViolation {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite loss encountered at episode {episode}")]
    NonFiniteLoss { episode: usize },
    #[error("invalid alpha {alpha}: requires alpha > 0 and h*alpha <= 1 (h = {h})")]
    InvalidAlpha { alpha: f64, h: f64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("invalid network file{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    InvalidNetworkFile { line: Option<usize>, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
