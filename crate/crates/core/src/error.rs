use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("assignment is not fully instantiated")]
    PartialAssignment,
    #[error("new value equals the current value of variable {0}")]
    SameValue(usize),
    #[error("model has {0} variables; exact enumeration is capped at {1}")]
    TooLarge(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("parent {parent} of variable {var} is not instantiated")]
    MissingParent { var: usize, parent: usize },
    #[error("variable {missing} of the blanket of {var} is not instantiated")]
    MissingBlanket { var: usize, missing: usize },
    #[error("stochastic estimator needs at least two children, variable {var} has {children}")]
    TooFewChildren { var: usize, children: usize },
    #[error("variable {got} is not the next variable in topological order (expected {expected})")]
    OrderViolation { expected: usize, got: usize },
    #[error("latent set covers every variable")]
    LatentCoversAll,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("orientation has an immorality at {0}")]
    Immorality(usize),
    #[error("variable {0} is out of range")]
    VariableOutOfRange(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
