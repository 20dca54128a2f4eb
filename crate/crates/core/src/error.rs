use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient frames: need at least {required}, source has {available}")]
    InsufficientFrames { required: usize, available: usize },

    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pixel value {value} at index {index} is outside the 8-bit range")]
    PixelOutOfRange { index: usize, value: f64 },

    #[error("slot {slot} out of range for {t_tok} temporal slots")]
    SlotOutOfRange { slot: usize, t_tok: usize },

    #[error("combination index {index} out of range (only {count} combinations)")]
    ComboOutOfRange { index: usize, count: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(
        "loss became non-finite at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})"
    )]
    Diverged { step: usize, lr: f64, grad_norm: f64 },

    #[error("model hash mismatch: expected {expected}, found {found}")]
    ModelMismatch { expected: String, found: String },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
