use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("source coincides with microphone")]
    CoincidentSource,
    #[error("signal of {len} samples exceeds clip length {max}")]
    SignalTooLong { len: usize, max: usize },
    #[error("clip too short: {len} samples, need at least {need}")]
    ClipTooShort { len: usize, need: usize },
    #[error("silent clip: no excerpt passed the energy gate after {tries} draws")]
    SilentClip { tries: usize },
    #[error("infeasible placement: {k} sources with separation {separation} m not found in {tries} tries")]
    Infeasible { k: usize, separation: f64, tries: usize },
    #[error("source separation violated: {distance:.3} m < {min:.3} m")]
    SeparationViolated { distance: f64, min: f64 },
    #[error("point ({x}, {y}) lies outside the grid")]
    OutsideGrid { x: f64, y: f64 },
    #[error("two sources share refined-grid cell ({row}, {col})")]
    SharedCell { row: usize, col: usize },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("batch statistics undefined in {layer}: only one value per channel")]
    SingletonStatistics { layer: String },
    #[error("backward called without a recorded forward pass")]
    UnrecordedGraph,
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("sample id mismatch: missing predictions for {missing:?}, unexpected predictions for {unexpected:?}")]
    SampleIdMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("malformed {what} at line {line}: {reason}")]
    Malformed {
        what: String,
        line: usize,
        reason: String,
    },
    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::CoincidentSource | Error::SignalTooLong { .. } | Error::ClipTooShort { .. } => {
                "E_SIGNAL"
            }
            Error::SilentClip { .. } => "E_SILENT",
            Error::Infeasible { .. } | Error::SeparationViolated { .. } => "E_PLACEMENT",
            Error::OutsideGrid { .. } | Error::SharedCell { .. } => "E_GRID",
            Error::Shape { .. } | Error::SingletonStatistics { .. } | Error::UnrecordedGraph => {
                "E_TENSOR"
            }
            Error::Config { .. } => "E_CONFIG",
            Error::BadMagic => "E_CKPT_MAGIC",
            Error::VersionMismatch { .. } => "E_CKPT_VERSION",
            Error::Truncated => "E_CKPT_TRUNCATED",
            Error::ChecksumMismatch => "E_CKPT_CRC",
            Error::UnknownParameter(_) | Error::MissingParameter(_) => "E_CKPT_PARAM",
            Error::SampleIdMismatch { .. } => "E_IDS",
            Error::Malformed { .. } | Error::Json(_) => "E_FORMAT",
            Error::Wav { .. } => "E_WAV",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
