use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op} expects a non-empty input list")]
    EmptyInput { op: &'static str },
    #[error("function under gradient check must be scalar-valued, got shape {0}")]
    NonScalar(Shape),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("keypoint similarity undefined: ground truth has no visible keypoints")]
    NoVisibleKeypoints,
    #[error("mean-field state is not initialized")]
    UninitializedState,
    #[error("{path} shape {found} disagrees with identity path {expected}")]
    PathShapeMismatch {
        path: &'static str,
        expected: Shape,
        found: Shape,
    },
    #[error("non-finite loss in head `{head}`")]
    NonFiniteLoss { head: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("malformed image header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("config mismatch on `{key}`: checkpoint has {found}, model has {expected}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("line {line}: visible keypoint `{part}` at ({x}, {y}) outside {w}x{h} image")]
    KeypointOutOfBounds {
        line: usize,
        part: &'static str,
        x: f64,
        y: f64,
        w: usize,
        h: usize,
    },
    #[error("line {line}: unknown part `{name}`")]
    UnknownPart { line: usize, name: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
