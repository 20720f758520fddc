use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("degenerate box after regression")]
    DegenerateBox,

    #[error("weight file has bad magic {found:?}, expected \"CAGE\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("weight file names unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("dimension mismatch for {layer}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing parameter tensor {0:?}")]
    MissingTensor(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_layer(self, layer: &str) -> Error {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by numeric blow-up rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => true,
            Error::Layer { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}
