use std::fmt;

/// Errors surfaced by the library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible array or batch shapes.
    Shape(String),
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(&'static str),
    /// An argument violated its documented domain.
    InvalidArgument(String),
    /// A token id fell outside the vocabulary.
    TokenOutOfRange { token: usize, vocab_size: usize },
    /// Parsing an interaction log failed.
    Parse { line: usize, message: String },
    /// Filtering removed every user.
    EmptyDataset,
    /// Every target position in a batch is padding.
    NoTargets,
    /// The gradient tape lacks an entry for a parameter group.
    MissingTapeEntry(String),
    /// The privacy budget cannot be met inside the noise search bracket.
    Calibration { target: f64, lo: f64, hi: f64 },
    /// The ledger exceeded the configured budget during training.
    BudgetExceeded { spent: f64, budget: f64, step: usize },
    /// Checkpoint I/O or format failure.
    Checkpoint(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::TokenOutOfRange { token, vocab_size } => {
                write!(f, "token id {token} outside vocabulary 0..={vocab_size}")
            }
            Error::Parse { line, message } => write!(f, "line {line}: {message}"),
            Error::EmptyDataset => write!(f, "no user survives filtering"),
            Error::NoTargets => write!(f, "all target positions are padding"),
            Error::MissingTapeEntry(name) => write!(f, "gradient tape has no entry for {name}"),
            Error::Calibration { target, lo, hi } => write!(
                f,
                "epsilon {target} is not reachable with noise multiplier in [{lo}, {hi}]"
            ),
            Error::BudgetExceeded { spent, budget, step } => write!(
                f,
                "privacy budget exceeded at step {step}: spent {spent} > {budget}"
            ),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Io(msg) => write!(f, "io: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
