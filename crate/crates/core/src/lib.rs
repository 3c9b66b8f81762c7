//! Pattern-repeatability analysis and evaluation toolkit for style imagery.
//!
//! The crate quantifies how strongly the local patches of an image repeat its
//! global texture (`repeatability`), provides feature-space stylization
//! operators as testable forward passes (`transforms`), evaluates stylization
//! outputs with a Gram-based loss battery (`losses`) and a metric triplet
//! (`metrics`), and batches the analysis over image folders (`corpus`).
//! Features come from either a pretrained VGG-19 ONNX graph or a
//! deterministic built-in test encoder (`encoder`).

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod repeatability;
pub mod tensor;
pub mod transforms;

pub use encoder::{resize, EncoderBackend, FeaturePyramid, LayerTap};
pub use error::{Error, Result};
pub use tensor::{
    gram, gram_cosine, patchify_features, patchify_image, FeatureMap, GramMatrix, Image,
};
