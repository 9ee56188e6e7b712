use std::path::PathBuf;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("no training signal: every pixel is labeled don't-care")]
    NoTrainingSignal,

    #[error("empty dataset passed to {0}")]
    EmptyDataset(&'static str),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("image format error in {path}: {detail}")]
    ImageFormat { path: PathBuf, detail: String },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("sequence `{name}`: {detail}")]
    Sequence { name: String, detail: String },

    #[error("refusing to overwrite existing output {0} (pass --force)")]
    OutputExists(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
