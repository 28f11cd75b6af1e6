use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: PNG decode failed: {message}")]
    PngDecode { path: PathBuf, message: String },
    #[error("{path}: PNG encode failed: {message}")]
    PngEncode { path: PathBuf, message: String },
    #[error("{path}: unsupported PNG bit depth {bits} (only 8-bit is supported)")]
    UnsupportedBitDepth { path: PathBuf, bits: u8 },
    #[error("{path}: unsupported PNG color type {color} (only RGB and grayscale)")]
    UnsupportedColorType { path: PathBuf, color: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("crop window {top},{left} {height}x{width} does not fit in a {image_height}x{image_width} image")]
    OutOfBounds {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        image_height: usize,
        image_width: usize,
    },
    #[error("invalid histogram grid: {0}")]
    InvalidGrid(String),
    #[error("histogram is not normalized (mass sums to {0})")]
    NotNormalized(f64),
    #[error("histograms are defined on different grids")]
    GridMismatch,
    #[error("invalid argument `{name}`: {message}")]
    InvalidArgument { name: &'static str, message: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("actnorm layers are already initialized")]
    AlreadyInitialized,
    #[error("actnorm layers are not initialized")]
    NotInitialized,
    #[error("manifest entry {index}: {message}")]
    ManifestEntry { index: usize, message: String },
    #[error("{path}: malformed manifest: {message}")]
    ManifestFormat { path: PathBuf, message: String },
    #[error("{path}: invalid checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
