use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset already carries injected noise (ratio {0})")]
    AlreadyNoisy(f32),

    #[error("noise ratio {0} is outside [0, 1]")]
    RatioOutOfRange(f64),

    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    FractionSum([f64; 3]),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("file truncated: needed {needed} bytes, {available} available")]
    TruncatedFile { needed: usize, available: usize },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("zero-norm embedding row {0}")]
    ZeroNormRow(usize),

    #[error("similarity matrix is {rows}x{cols}, expected square")]
    NonSquare { rows: usize, cols: usize },

    #[error("evaluation batch size {0} is below 2")]
    BatchTooSmall(usize),

    #[error("weight {value} at position {index} is outside (0, 1]")]
    WeightOutOfRange { index: usize, value: f64 },

    #[error("memory entry set is empty")]
    EmptyEntrySet,

    #[error("all losses are equal; mixture fit is degenerate")]
    DegenerateInput,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("no sample reaches clean threshold {tau}")]
    EmptyCleanSet { tau: f64 },

    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate entry loss for batch sample {0}")]
    DegenerateEntryLoss(usize),

    #[error("k = {k} exceeds {candidates} candidates")]
    KExceedsCandidates { k: usize, candidates: usize },

    #[error("need at least 2 values, got {0}")]
    TooFewValues(usize),

    #[error("selection is empty")]
    EmptySelection,

    #[error("no {0} samples present")]
    MissingClass(&'static str),

    #[error("config hash mismatch: {0} vs {1}")]
    ConfigHashMismatch(String, String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
