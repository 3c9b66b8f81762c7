//! Multi-layer feature extraction.
//!
//! Two interchangeable backends produce [`FeaturePyramid`]s: a pretrained
//! VGG-19 graph loaded from an ONNX file, and a deterministic seeded test
//! encoder that needs no model download. Both emit post-activation
//! (nonnegative) features at up to five taps named `relu1_1..relu5_1`.

mod pretrained;
mod test_backend;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image};

pub use pretrained::{ModelManifest, PretrainedVgg};
pub use test_backend::TestEncoder;

/// Minimum input side so the deepest tap stays nonempty.
pub const MIN_INPUT_SIDE: usize = 32;

/// One of the five named encoder taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerTap(u8);

impl LayerTap {
    pub const ALL: [LayerTap; 5] = [
        LayerTap(1),
        LayerTap(2),
        LayerTap(3),
        LayerTap(4),
        LayerTap(5),
    ];

    /// Taps used by the style/content losses.
    pub const STYLE: [LayerTap; 2] = [LayerTap(4), LayerTap(5)];

    pub fn new(index: u8) -> Option<LayerTap> {
        (1..=5).contains(&index).then_some(LayerTap(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            1 => "relu1_1",
            2 => "relu2_1",
            3 => "relu3_1",
            4 => "relu4_1",
            _ => "relu5_1",
        }
    }

    pub fn from_name(name: &str) -> Option<LayerTap> {
        LayerTap::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Channel count of the tap contract (VGG-19 widths).
    pub fn channels(self) -> usize {
        [64, 128, 256, 512, 512][self.0 as usize - 1]
    }

    /// Spatial downsample factor relative to the input.
    pub fn stride(self) -> usize {
        1 << (self.0 - 1)
    }
}

impl fmt::Display for LayerTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for LayerTap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for LayerTap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        LayerTap::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown tap {name}")))
    }
}

/// Ordered list of per-tap feature maps from one encode call.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    taps: Vec<(LayerTap, FeatureMap)>,
    source_size: (usize, usize),
}

impl FeaturePyramid {
    /// Validates strict tap ordering and the ⌊source/stride⌋ spatial contract.
    pub fn new(taps: Vec<(LayerTap, FeatureMap)>, source_size: (usize, usize)) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::ShapeMismatch("pyramid without taps".into()));
        }
        for pair in taps.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::ShapeMismatch(format!(
                    "taps out of order: {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for (tap, map) in &taps {
            let expect = (source_size.0 / tap.stride(), source_size.1 / tap.stride());
            if (map.height(), map.width()) != expect {
                return Err(Error::ShapeMismatch(format!(
                    "{tap} map is {}x{}, expected {}x{} for source {}x{}",
                    map.height(),
                    map.width(),
                    expect.0,
                    expect.1,
                    source_size.0,
                    source_size.1
                )));
            }
        }
        Ok(Self { taps, source_size })
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn taps(&self) -> &[(LayerTap, FeatureMap)] {
        &self.taps
    }

    pub fn get(&self, tap: LayerTap) -> Option<&FeatureMap> {
        self.taps
            .iter()
            .find(|(t, _)| *t == tap)
            .map(|(_, m)| m)
    }

    /// Like [`get`](Self::get) but reports the missing tap as an error.
    pub fn require(&self, tap: LayerTap) -> Result<&FeatureMap> {
        self.get(tap)
            .ok_or_else(|| Error::MissingTap(tap.name().into()))
    }
}

/// Feature-extraction backend. Immutable once constructed; encode calls may
/// run from any number of threads.
pub enum EncoderBackend {
    Test(TestEncoder),
    Pretrained(Box<PretrainedVgg>),
}

impl EncoderBackend {
    /// Deterministic built-in encoder: `depth` taps of seeded 1x1 pointwise
    /// maps + ReLU with 2x2 average pooling between taps.
    pub fn test(seed: u64, depth: u8) -> Result<Self> {
        Ok(EncoderBackend::Test(TestEncoder::new(seed, depth)?))
    }

    /// Pretrained VGG-19 from an ONNX file with five named outputs; an
    /// optional `<model>.json` sidecar overrides outputs and normalization.
    pub fn pretrained(path: impl AsRef<Path>) -> Result<Self> {
        Ok(EncoderBackend::Pretrained(Box::new(PretrainedVgg::load(
            path,
        )?)))
    }

    pub fn available_taps(&self) -> Vec<LayerTap> {
        match self {
            EncoderBackend::Test(t) => LayerTap::ALL[..t.depth() as usize].to_vec(),
            EncoderBackend::Pretrained(_) => LayerTap::ALL.to_vec(),
        }
    }

    /// Stable description echoed into reports (`test:seed:depth` or
    /// `pretrained:<path>`).
    pub fn describe(&self) -> String {
        match self {
            EncoderBackend::Test(t) => format!("test:{}:{}", t.seed(), t.depth()),
            EncoderBackend::Pretrained(p) => format!("pretrained:{}", p.path().display()),
        }
    }

    /// Encodes `img` and returns exactly the requested taps, sorted by index.
    pub fn encode(&self, img: &Image, taps: &[LayerTap]) -> Result<FeaturePyramid> {
        if img.height() < MIN_INPUT_SIDE || img.width() < MIN_INPUT_SIDE {
            return Err(Error::InputTooSmall {
                height: img.height(),
                width: img.width(),
                min: MIN_INPUT_SIDE,
            });
        }
        if taps.is_empty() {
            return Err(Error::ShapeMismatch("no taps requested".into()));
        }
        let mut wanted: Vec<LayerTap> = taps.to_vec();
        wanted.sort();
        wanted.dedup();
        match self {
            EncoderBackend::Test(t) => t.encode(img, &wanted),
            EncoderBackend::Pretrained(p) => p.encode(img, &wanted),
        }
    }
}

/// Bilinear resample with half-pixel centers (corners-aligned-off).
/// Resizing to the source size is the identity; constants stay constant.
pub fn resize(img: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "resize target must be nonempty");
    if height == img.height() && width == img.width() {
        return img.clone();
    }
    let (sh, sw) = (img.height(), img.width());
    let scale_y = sh as f64 / height as f64;
    let scale_x = sw as f64 / width as f64;

    let mut data = vec![0f32; Image::CHANNELS * height * width];
    for c in 0..Image::CHANNELS {
        let src = img.channel(c);
        let plane = &mut data[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let fy = sy - y0 as f64;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let fx = sx - x0 as f64;

                let v00 = src[y0 * sw + x0] as f64;
                let v01 = src[y0 * sw + x1] as f64;
                let v10 = src[y1 * sw + x0] as f64;
                let v11 = src[y1 * sw + x1] as f64;
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                plane[y * width + x] = (top + fy * (bot - top)) as f32;
            }
        }
    }
    Image::from_raw(height, width, data)
}
