//! Evaluation triplet for (content, style, stylized) images: content
//! fidelity, five-crop style loss, and pattern difference.

use serde::{Deserialize, Serialize};

use crate::encoder::{resize, EncoderBackend};
use crate::error::{Error, Result};
use crate::losses::image_style_loss;
use crate::repeatability::{pattern_repeatability, ConfigEcho, RepeatabilityConfig};
use crate::tensor::Image;

/// Minimum image side for the five-crop layout.
const FIVE_CROP_MIN_SIDE: usize = 64;

/// Crops are resized to this side before the style loss.
const FIVE_CROP_RESIZE: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub content_fidelity: f64,
    pub style_loss_5crop: f64,
    pub pattern_difference: f64,
    pub config: ConfigEcho,
}

/// Layer-averaged cosine similarity between stylized and content features,
/// over every tap the backend provides.
pub fn content_fidelity(
    stylized: &Image,
    content: &Image,
    backend: &EncoderBackend,
) -> Result<f64> {
    let taps = backend.available_taps();
    let a = backend.encode(stylized, &taps)?;
    let b = backend.encode(content, &taps)?;
    let mut total = 0f64;
    for tap in &taps {
        let (ma, mb) = (a.require(*tap)?, b.require(*tap)?);
        if ma.data().len() != mb.data().len() {
            return Err(Error::ShapeMismatch(format!(
                "{tap} features differ in size"
            )));
        }
        let mut dot = 0f64;
        let mut na = 0f64;
        let mut nb = 0f64;
        for (&x, &y) in ma.data().iter().zip(mb.data()) {
            let (x, y) = (x as f64, y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNormFeature {
                tap: tap.name().into(),
            });
        }
        total += dot / (na.sqrt() * nb.sqrt());
    }
    Ok(total / taps.len() as f64)
}

/// One square crop window: (top, left) corner and side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

/// Four corners plus center, each of side ⌊min(H, W)/2⌋.
pub fn five_crop_layout(height: usize, width: usize) -> Result<[CropRect; 5]> {
    if height.min(width) < FIVE_CROP_MIN_SIDE {
        return Err(Error::ImageTooSmall { height, width });
    }
    let side = height.min(width) / 2;
    let bottom = height - side;
    let right = width - side;
    Ok([
        CropRect { top: 0, left: 0, side },
        CropRect { top: 0, left: right, side },
        CropRect { top: bottom, left: 0, side },
        CropRect { top: bottom, left: right, side },
        CropRect { top: bottom / 2, left: right / 2, side },
    ])
}

/// Mean image-level style loss over five matched crops, each resized to
/// 256x256 first.
pub fn style_loss_metric(
    stylized: &Image,
    style: &Image,
    backend: &EncoderBackend,
) -> Result<f64> {
    let crops_a = five_crop_layout(stylized.height(), stylized.width())?;
    let crops_b = five_crop_layout(style.height(), style.width())?;
    let mut total = 0f64;
    for (ra, rb) in crops_a.iter().zip(&crops_b) {
        let ca = resize(
            &stylized.crop(ra.top, ra.left, ra.side, ra.side)?,
            FIVE_CROP_RESIZE,
            FIVE_CROP_RESIZE,
        );
        let cb = resize(
            &style.crop(rb.top, rb.left, rb.side, rb.side)?,
            FIVE_CROP_RESIZE,
            FIVE_CROP_RESIZE,
        );
        total += image_style_loss(&ca, &cb, backend)?;
    }
    Ok(total / 5.0)
}

/// L1 distance between the repeatability of the style image and of the
/// stylized result.
pub fn pattern_difference(
    style: &Image,
    stylized: &Image,
    backend: &EncoderBackend,
    cfg: &RepeatabilityConfig,
) -> Result<f64> {
    let a = pattern_repeatability(style, backend, cfg)?;
    let b = pattern_repeatability(stylized, backend, cfg)?;
    Ok((a.alpha_style - b.alpha_style).abs())
}

/// Runs the three metrics for one triple.
pub fn evaluate_triple(
    content: &Image,
    style: &Image,
    stylized: &Image,
    backend: &EncoderBackend,
    cfg: &RepeatabilityConfig,
) -> Result<EvalReport> {
    Ok(EvalReport {
        content_fidelity: content_fidelity(stylized, content, backend)?,
        style_loss_5crop: style_loss_metric(stylized, style, backend)?,
        pattern_difference: pattern_difference(style, stylized, backend, cfg)?,
        config: ConfigEcho::new(cfg, backend),
    })
}
