use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("box for object {index} lies outside the unit image: {detail}")]
    OutOfBounds { index: usize, detail: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("inconsistent sequence lengths: sequence {seq_id} has {got} frames, expected {expected}")]
    InconsistentSequence {
        seq_id: String,
        expected: usize,
        got: usize,
    },

    #[error("sequence {0} has no ground truth on its final frame")]
    MissingTruth(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("sequence {seq_id} frame {frame}: vector length {got}, expected {expected}")]
    FrameLength {
        seq_id: String,
        frame: usize,
        expected: usize,
        got: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::Dimension { .. } => "dimension_mismatch",
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::EmptyDataset => "empty_dataset",
            Error::InconsistentSequence { .. } => "inconsistent_sequence",
            Error::MissingTruth(_) => "missing_truth",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Version { .. } => "version_mismatch",
            Error::Header(_) => "malformed_header",
            Error::Format(_) => "format_error",
            Error::FrameLength { .. } => "length_mismatch",
            Error::Io(_) => "io_error",
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}
