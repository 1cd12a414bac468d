use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: loss is not recorded on a tape")]
    NotTracked,

    #[error("{0}: inputs are recorded on different tapes")]
    TapeMismatch(&'static str),

    #[error("conv_temporal: kernel width {0} must be odd")]
    EvenKernel(usize),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("timestep ordering: {0}")]
    Timestep(String),

    #[error("mask: {0}")]
    Mask(String),

    #[error("empty foreground in mask")]
    EmptyForeground,

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),

    #[error("reconstruction cache miss: layer {layer}, timestep {timestep}, frame {frame:?}")]
    CacheMiss {
        layer: String,
        timestep: usize,
        frame: Option<usize>,
    },

    #[error("reconstruction cache entry written twice: layer {layer}, timestep {timestep}, frame {frame:?}")]
    CacheOverwrite {
        layer: String,
        timestep: usize,
        frame: Option<usize>,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("keypoints: {0}")]
    Keypoints(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at training step {step}")]
    NonFiniteLoss { step: usize, loss: f32 },

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn in_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
