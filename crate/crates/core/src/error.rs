use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("channel count mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("gram matrix has zero Frobenius norm")]
    ZeroNormGram,

    #[error("feature map at {tap} has zero norm")]
    ZeroNormFeature { tap: String },

    #[error("ratio {ratio} yields empty patches for a {height}x{width} grid")]
    PatchTooSmall {
        height: usize,
        width: usize,
        ratio: u32,
    },

    #[error("input {height}x{width} below the {min}x{min} encoder minimum")]
    InputTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("image {height}x{width} too small for five-crop evaluation (min side 64)")]
    ImageTooSmall { height: usize, width: usize },

    #[error("tap {0} is not available from this backend")]
    MissingTap(String),

    #[error("no tap admits the requested patch ratio")]
    NoValidTap,

    #[error("{name} = {value} outside [{lo}, {hi}]")]
    Domain {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("eigendecomposition did not converge")]
    EigenFailure,

    #[error("model load failed: {0}")]
    ModelLoad(String),

    #[error("no decodable images under {}", .0.display())]
    EmptyCorpus(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Decode(#[from] image::ImageError),
}
