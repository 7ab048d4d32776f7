use thiserror::Error;

/// Errors produced by the detection library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported QAM order {0}; supported orders are 4, 16 and 64")]
    UnsupportedOrder(usize),

    #[error("bit count {len} is not a multiple of {bits_per_symbol} bits per symbol")]
    BitLength { len: usize, bits_per_symbol: usize },

    #[error("symbol {index} ({re}, {im}) is not a constellation point")]
    OffConstellation { index: usize, re: f64, im: f64 },

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid probability {value} at component {component}, level {level}")]
    Probability {
        component: usize,
        level: usize,
        value: f64,
    },

    #[error("noise variance must be positive, got {0}")]
    NoiseVariance(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("instance too large for exhaustive enumeration: {bits} bits of outcomes (limit {limit})")]
    TooLarge { bits: usize, limit: usize },

    #[error("linear system is not positive definite")]
    NotPositiveDefinite,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
