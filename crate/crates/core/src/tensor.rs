//! Raster and feature containers plus the Gram-matrix algebra built on them.
//!
//! Images are 3-channel RGB rasters with unit-interval samples; feature maps
//! are (C, H, W) activation volumes. Both store planar row-major data. All
//! reductions accumulate in f64.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded RGB raster, values in [0, 1], planar (3, H, W) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Builds an image from planar (3, H, W) data, validating that every
    /// sample is finite and within [0, 1].
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "degenerate size {height}x{width}"
            )));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::InvalidImage(format!(
                "expected {} samples, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(
                "sample outside [0, 1] or not finite".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Internal constructor for operations that preserve the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), Self::CHANNELS * height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    /// Decodes a PNG or JPEG file; 8-bit channels map to [0, 1] via v/255.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0f32; Self::CHANNELS * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..Self::CHANNELS {
                data[c * h * w + y * w + x] = px[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    /// Encodes as 8-bit PNG, rounding v*255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..Self::CHANNELS {
                px[c] = (self.get(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        out.save(path)?;
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// One channel plane as a contiguous row-major slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rec.601 luma replicated into all three channels, so the result still
    /// satisfies the 3-channel encoder input contract.
    pub fn to_grayscale(&self) -> Image {
        let plane = self.height * self.width;
        let mut gray = vec![0f32; plane];
        for (i, g) in gray.iter_mut().enumerate() {
            let y = 0.299 * self.data[i] as f64
                + 0.587 * self.data[plane + i] as f64
                + 0.114 * self.data[2 * plane + i] as f64;
            *g = y as f32;
        }
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
        Image::from_raw(self.height, self.width, data)
    }

    /// Axis-aligned crop; errors when the window leaves the raster.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let data = extract_block(
            &self.data,
            Self::CHANNELS,
            self.height,
            self.width,
            top,
            left,
            height,
            width,
        );
        Ok(Image::from_raw(height, width, data))
    }

    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::from_raw(Self::CHANNELS, self.height, self.width, self.data.clone())
    }
}

/// Activation volume in (C, H, W) planar layout, finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "empty feature map {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidImage("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value vector at one spatial position (length C).
    pub fn position(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }
}

/// C-by-C second-order feature statistic. `centered` records which variant
/// produced it. Entries are stored in f64 so downstream cosines and norms
/// stay exact enough for tight tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    dim: usize,
    centered: bool,
    data: Vec<f64>,
}

impl GramMatrix {
    /// Builds from row-major C*C data, enforcing the symmetry tolerance.
    pub fn new(dim: usize, centered: bool, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "gram expects {dim}x{dim} = {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if (a - b).abs() > 1e-6 * a.abs().max(1.0) {
                    return Err(Error::ShapeMismatch(format!(
                        "asymmetric gram at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            centered,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centered(&self) -> bool {
        self.centered
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gram matrix G = F·Fᵀ / (H·W) of the C×(H·W) flattening; the centered
/// variant subtracts each channel's spatial mean before the product.
pub fn gram(f: &FeatureMap, centered: bool) -> GramMatrix {
    let c = f.channels();
    let hw = f.spatial_len() as f64;
    let means: Vec<f64> = if centered {
        (0..c)
            .map(|i| f.channel(i).iter().map(|&v| v as f64).sum::<f64>() / hw)
            .collect()
    } else {
        Vec::new()
    };
    let mut data = vec![0f64; c * c];
    for i in 0..c {
        let fi = f.channel(i);
        for j in i..c {
            let fj = f.channel(j);
            let mut dot = 0f64;
            for (&a, &b) in fi.iter().zip(fj) {
                dot += a as f64 * b as f64;
            }
            let mut g = dot / hw;
            if centered {
                // E[xy] - E[x]E[y]; exact zero for constant channels.
                g -= means[i] * means[j];
            }
            data[i * c + j] = g;
            data[j * c + i] = g;
        }
    }
    GramMatrix {
        dim: c,
        centered,
        data,
    }
}

/// Cosine similarity of two Gram matrices under the Frobenius inner product.
/// Result is clamped to [-1, 1]; plain Grams of nonnegative features land in
/// [0, 1].
pub fn gram_cosine(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::ChannelMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormGram);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn patch_dims(height: usize, width: usize, ratio: u32) -> Result<(usize, usize)> {
    if ratio == 0 {
        return Err(Error::PatchTooSmall {
            height,
            width,
            ratio,
        });
    }
    let ph = height / ratio as usize;
    let pw = width / ratio as usize;
    if ph == 0 || pw == 0 {
        return Err(Error::PatchTooSmall {
            height,
            width,
            ratio,
        });
    }
    Ok((ph, pw))
}

#[allow(clippy::too_many_arguments)]
fn extract_block(
    data: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    top: usize,
    left: usize,
    block_h: usize,
    block_w: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * block_h * block_w);
    let plane = height * width;
    for c in 0..channels {
        for y in top..top + block_h {
            let row = c * plane + y * width + left;
            out.extend_from_slice(&data[row..row + block_w]);
        }
    }
    out
}

/// Non-overlapping r×r grid of patches, row-major order. Trailing rows and
/// columns beyond r·⌊H/r⌋ are cropped, never padded.
pub fn patchify_features(f: &FeatureMap, ratio: u32) -> Result<Vec<FeatureMap>> {
    let (ph, pw) = patch_dims(f.height(), f.width(), ratio)?;
    let r = ratio as usize;
    let mut out = Vec::with_capacity(r * r);
    for gy in 0..r {
        for gx in 0..r {
            let data = extract_block(
                f.data(),
                f.channels(),
                f.height(),
                f.width(),
                gy * ph,
                gx * pw,
                ph,
                pw,
            );
            out.push(FeatureMap::from_raw(f.channels(), ph, pw, data));
        }
    }
    Ok(out)
}

/// Same grid semantics as [`patchify_features`], applied to rasters.
pub fn patchify_image(img: &Image, scale: u32) -> Result<Vec<Image>> {
    let (ph, pw) = patch_dims(img.height(), img.width(), scale)?;
    let s = scale as usize;
    let mut out = Vec::with_capacity(s * s);
    for gy in 0..s {
        for gx in 0..s {
            let data = extract_block(
                img.data(),
                Image::CHANNELS,
                img.height(),
                img.width(),
                gy * ph,
                gx * pw,
                ph,
                pw,
            );
            out.push(Image::from_raw(ph, pw, data));
        }
    }
    Ok(out)
}
