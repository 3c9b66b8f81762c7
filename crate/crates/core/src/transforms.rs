//! Feature-space stylization operators as forward passes: adaptive instance
//! normalization, whitening/coloring, parameter-free attention transfer, and
//! the repeatability-weighted blend. No decoder is involved; every operator
//! maps feature maps to feature maps so its statistics contracts stay
//! directly testable.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeaturePyramid, LayerTap};
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

const EPS: f64 = 1e-5;

/// Default eigenvalue clamp for the whitening/coloring transform.
pub const DEFAULT_WCT_EPS: f64 = 1e-5;

/// Square channel-space linear map, applied independently at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    dim: usize,
    data: Vec<f32>,
}

impl ChannelMap {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::ShapeMismatch(format!(
                "channel map expects {dim}x{dim} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0f32; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn apply(&self, f: &FeatureMap) -> Result<FeatureMap> {
        if f.channels() != self.dim {
            return Err(Error::ChannelMismatch {
                left: self.dim,
                right: f.channels(),
            });
        }
        let plane = f.spatial_len();
        let mut out = vec![0f32; self.dim * plane];
        for o in 0..self.dim {
            let row = &self.data[o * self.dim..(o + 1) * self.dim];
            let acc = &mut out[o * plane..(o + 1) * plane];
            for (i, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (a, &v) in acc.iter_mut().zip(f.channel(i)) {
                    *a += w * v;
                }
            }
        }
        FeatureMap::new(self.dim, f.height(), f.width(), out)
    }
}

/// Optional query/key/value projections for the attention transfer. `None`
/// means identity, which is the parameter-free default.
#[derive(Debug, Clone, Default)]
pub struct ProjectionSet {
    pub query: Option<ChannelMap>,
    pub key: Option<ChannelMap>,
    pub value: Option<ChannelMap>,
}

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    entries: Vec<ProjectionEntry>,
}

#[derive(Serialize, Deserialize)]
struct ProjectionEntry {
    role: String,
    dim: usize,
}

const PROJECTION_MAGIC: &[u8; 4] = b"PLPJ";

impl ProjectionSet {
    pub fn identity() -> Self {
        Self::default()
    }

    fn slot(&mut self, role: &str) -> Result<&mut Option<ChannelMap>> {
        match role {
            "query" => Ok(&mut self.query),
            "key" => Ok(&mut self.key),
            "value" => Ok(&mut self.value),
            other => Err(Error::ModelLoad(format!(
                "unknown projection role {other:?}"
            ))),
        }
    }

    /// Reads the projection weight file: 4-byte magic, u32-le header length,
    /// JSON header naming roles and dimensions, then row-major f32-le
    /// matrices in header order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != PROJECTION_MAGIC {
            return Err(Error::ModelLoad("bad projection file magic".into()));
        }
        let mut len = [0u8; 4];
        file.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        file.read_exact(&mut header)?;
        let header: ProjectionHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::ModelLoad(format!("projection header: {e}")))?;

        let mut set = ProjectionSet::default();
        for entry in &header.entries {
            let mut raw = vec![0u8; entry.dim * entry.dim * 4];
            file.read_exact(&mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let slot = set.slot(&entry.role)?;
            if slot.is_some() {
                return Err(Error::ModelLoad(format!(
                    "duplicate projection role {:?}",
                    entry.role
                )));
            }
            *slot = Some(ChannelMap::new(entry.dim, data)?);
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let roles: [(&str, &Option<ChannelMap>); 3] = [
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
        ];
        let entries: Vec<ProjectionEntry> = roles
            .iter()
            .filter_map(|(role, m)| {
                m.as_ref().map(|m| ProjectionEntry {
                    role: role.to_string(),
                    dim: m.dim(),
                })
            })
            .collect();
        let header = serde_json::to_vec(&ProjectionHeader { entries })
            .map_err(|e| Error::ModelLoad(format!("projection header: {e}")))?;

        let mut file = std::fs::File::create(path)?;
        file.write_all(PROJECTION_MAGIC)?;
        file.write_all(&(header.len() as u32).to_le_bytes())?;
        file.write_all(&header)?;
        for (_, m) in roles.iter() {
            if let Some(m) = m {
                for v in m.data() {
                    file.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

fn check_channels(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.channels() != b.channels() {
        return Err(Error::ChannelMismatch {
            left: a.channels(),
            right: b.channels(),
        });
    }
    Ok(())
}

/// Per-channel population mean and standard deviation over spatial positions.
fn channel_stats(f: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let n = f.spatial_len() as f64;
    let mut means = Vec::with_capacity(f.channels());
    let mut stds = Vec::with_capacity(f.channels());
    for c in 0..f.channels() {
        let ch = f.channel(c);
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

/// Renormalizes each content channel to the style channel's mean/std:
/// out = (content − μ_c) / (σ_c + ε) · σ_s + μ_s.
pub fn adain(content: &FeatureMap, style: &FeatureMap) -> Result<FeatureMap> {
    check_channels(content, style)?;
    let (mu_c, sd_c) = channel_stats(content);
    let (mu_s, sd_s) = channel_stats(style);
    let plane = content.spatial_len();
    let mut out = vec![0f32; content.channels() * plane];
    for c in 0..content.channels() {
        let scale = sd_s[c] / (sd_c[c] + EPS);
        let src = content.channel(c);
        let dst = &mut out[c * plane..(c + 1) * plane];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = ((v as f64 - mu_c[c]) * scale + mu_s[c]) as f32;
        }
    }
    FeatureMap::new(content.channels(), content.height(), content.width(), out)
}

/// Centered data matrix (C x n, f64) and the channel means.
fn centered(f: &FeatureMap) -> (DMatrix<f64>, Vec<f64>) {
    let n = f.spatial_len();
    let c = f.channels();
    let mut means = Vec::with_capacity(c);
    let mut m = DMatrix::zeros(c, n);
    for i in 0..c {
        let ch = f.channel(i);
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        means.push(mean);
        for (j, &v) in ch.iter().enumerate() {
            m[(i, j)] = v as f64 - mean;
        }
    }
    (m, means)
}

/// Symmetric matrix power via eigendecomposition with eigenvalues clamped at
/// `eps`: E · diag(max(λ, eps)^p) · Eᵀ.
fn sym_power(cov: DMatrix<f64>, power: f64, eps: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, 10_000).ok_or(Error::EigenFailure)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(eps).powf(power)));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn covariance(centered: &DMatrix<f64>) -> DMatrix<f64> {
    let n = centered.ncols() as f64;
    centered * centered.transpose() / (n - 1.0)
}

/// Whitens centered content features so their covariance is the identity on
/// the nondegenerate eigenspace. Output is mean-free.
pub fn whiten(f: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    if f.spatial_len() < 2 {
        return Err(Error::ShapeMismatch(
            "whitening needs at least 2 spatial positions".into(),
        ));
    }
    let (x, _) = centered(f);
    let w = sym_power(covariance(&x), -0.5, eps)?;
    let y = w * &x;
    matrix_to_map(&y, f.channels(), f.height(), f.width(), None)
}

fn matrix_to_map(
    m: &DMatrix<f64>,
    channels: usize,
    height: usize,
    width: usize,
    offsets: Option<&[f64]>,
) -> Result<FeatureMap> {
    let plane = height * width;
    let mut data = vec![0f32; channels * plane];
    for c in 0..channels {
        let off = offsets.map_or(0.0, |o| o[c]);
        for j in 0..plane {
            data[c * plane + j] = (m[(c, j)] + off) as f32;
        }
    }
    FeatureMap::new(channels, height, width, data)
}

/// Whitening/coloring transform: content covariance is washed out and
/// replaced with the style covariance, then style channel means are added.
pub fn wct(content: &FeatureMap, style: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    check_channels(content, style)?;
    if content.spatial_len() < 2 || style.spatial_len() < 2 {
        return Err(Error::ShapeMismatch(
            "wct needs at least 2 spatial positions per input".into(),
        ));
    }
    let (xc, _) = centered(content);
    let (xs, mu_s) = centered(style);
    let white = sym_power(covariance(&xc), -0.5, eps)?;
    let color = sym_power(covariance(&xs), 0.5, eps)?;
    let y = color * white * &xc;
    matrix_to_map(
        &y,
        content.channels(),
        content.height(),
        content.width(),
        Some(&mu_s),
    )
}

/// Instance norm without affine terms: per channel, (x − μ) / (σ + ε).
fn instance_norm(f: &FeatureMap) -> FeatureMap {
    let (means, stds) = channel_stats(f);
    let plane = f.spatial_len();
    let mut out = vec![0f32; f.channels() * plane];
    for c in 0..f.channels() {
        let inv = 1.0 / (stds[c] + EPS);
        let src = f.channel(c);
        let dst = &mut out[c * plane..(c + 1) * plane];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = ((v as f64 - means[c]) * inv) as f32;
        }
    }
    FeatureMap::from_raw(f.channels(), f.height(), f.width(), out)
}

/// Non-overlapping k×k average pool, cropping remainders like the patch grid
/// does.
fn avg_pool(f: &FeatureMap, k: usize) -> FeatureMap {
    if k == 1 {
        return f.clone();
    }
    let (h, w) = (f.height() / k, f.width() / k);
    let norm = 1.0 / (k * k) as f32;
    let mut data = vec![0f32; f.channels() * h * w];
    for c in 0..f.channels() {
        let src = f.channel(c);
        let dst = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for dy in 0..k {
                    let row = (y * k + dy) * f.width() + x * k;
                    for dx in 0..k {
                        acc += src[row + dx];
                    }
                }
                dst[y * w + x] = acc * norm;
            }
        }
    }
    FeatureMap::from_raw(f.channels(), h, w, data)
}

/// Downsamples taps 1..=l to tap-l resolution, instance-normalizes each, and
/// stacks them along the channel axis.
fn normalized_concat(pyr: &FeaturePyramid, level: LayerTap) -> Result<FeatureMap> {
    let target = pyr.require(level)?;
    let (th, tw) = (target.height(), target.width());
    let mut channels = 0usize;
    let mut parts = Vec::new();
    for idx in 1..=level.index() {
        let tap = LayerTap::new(idx).expect("bounded");
        let map = pyr.require(tap)?;
        let factor = level.stride() / tap.stride();
        let pooled = avg_pool(map, factor);
        if (pooled.height(), pooled.width()) != (th, tw) {
            return Err(Error::ShapeMismatch(format!(
                "pooled {tap} is {}x{}, tap {level} is {th}x{tw}",
                pooled.height(),
                pooled.width()
            )));
        }
        let normed = instance_norm(&pooled);
        channels += normed.channels();
        parts.push(normed);
    }
    let mut data = Vec::with_capacity(channels * th * tw);
    for part in &parts {
        data.extend_from_slice(part.data());
    }
    Ok(FeatureMap::from_raw(channels, th, tw, data))
}

/// Attention-based per-position statistic transfer at tap `level`.
///
/// Queries come from the content pyramid's normalized multi-scale stack,
/// keys from the style stack, values from the style tap features. Each
/// content position receives an attention-weighted mean and standard
/// deviation of the style values, which then re-modulate the
/// instance-normalized content features.
pub fn attention_transfer(
    content_pyr: &FeaturePyramid,
    style_pyr: &FeaturePyramid,
    level: LayerTap,
    proj: &ProjectionSet,
) -> Result<FeatureMap> {
    let content_tap = content_pyr.require(level)?;
    let style_tap = style_pyr.require(level)?;
    check_channels(content_tap, style_tap)?;

    let q_stack = normalized_concat(content_pyr, level)?;
    let k_stack = normalized_concat(style_pyr, level)?;
    check_channels(&q_stack, &k_stack)?;

    let q = match &proj.query {
        Some(m) => m.apply(&q_stack)?,
        None => q_stack,
    };
    let k = match &proj.key {
        Some(m) => m.apply(&k_stack)?,
        None => k_stack,
    };
    check_channels(&q, &k)?;
    let v = match &proj.value {
        Some(m) => m.apply(style_tap)?,
        None => style_tap.clone(),
    };

    let d = q.channels();
    let scale = 1.0 / (d as f64).sqrt();
    let n_content = content_tap.spatial_len();
    let n_style = v.spatial_len();
    let c_out = v.channels();

    // V and V⊙V as (n_style, C) rows for the weighted reductions.
    let mut v_rows = vec![0f64; n_style * c_out];
    let mut v2_rows = vec![0f64; n_style * c_out];
    for c in 0..c_out {
        for (j, &val) in v.channel(c).iter().enumerate() {
            let val = val as f64;
            v_rows[j * c_out + c] = val;
            v2_rows[j * c_out + c] = val * val;
        }
    }

    let normed_content = instance_norm(content_tap);
    let plane = content_tap.spatial_len();
    let mut out = vec![0f32; c_out * plane];
    let mut scores = vec![0f64; n_style];

    for pos in 0..n_content {
        // scores = Qᵀ[pos] · K / sqrt(d)
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0f64;
            for c in 0..d {
                dot += q.channel(c)[pos] as f64 * k.channel(c)[j] as f64;
            }
            *s = dot * scale;
        }
        // row softmax
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        let inv = 1.0 / denom;

        for c in 0..c_out {
            let mut mean = 0f64;
            let mut second = 0f64;
            for j in 0..n_style {
                let a = scores[j] * inv;
                mean += a * v_rows[j * c_out + c];
                second += a * v2_rows[j * c_out + c];
            }
            let std = (second - mean * mean).max(0.0).sqrt();
            out[c * plane + pos] = (std * normed_content.channel(c)[pos] as f64 + mean) as f32;
        }
    }
    FeatureMap::new(c_out, content_tap.height(), content_tap.width(), out)
}

/// Nearest-neighbor upsample of `f5` to `f4`'s size, add, then apply the
/// optional channel map `h` (identity when `None`).
pub fn attn_fuse(f4: &FeatureMap, f5: &FeatureMap, h: Option<&ChannelMap>) -> Result<FeatureMap> {
    check_channels(f4, f5)?;
    let half_h = f4.height() / 2;
    let half_w = f4.width() / 2;
    if f5.height().abs_diff(half_h) > 1 || f5.width().abs_diff(half_w) > 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected roughly half of {}x{}, got {}x{}",
            f4.height(),
            f4.width(),
            f5.height(),
            f5.width()
        )));
    }
    let plane = f4.spatial_len();
    let mut data = vec![0f32; f4.channels() * plane];
    for c in 0..f4.channels() {
        let coarse = f5.channel(c);
        let fine = f4.channel(c);
        let dst = &mut data[c * plane..(c + 1) * plane];
        for y in 0..f4.height() {
            let sy = (y / 2).min(f5.height() - 1);
            for x in 0..f4.width() {
                let sx = (x / 2).min(f5.width() - 1);
                dst[y * f4.width() + x] = fine[y * f4.width() + x] + coarse[sy * f5.width() + sx];
            }
        }
    }
    let sum = FeatureMap::from_raw(f4.channels(), f4.height(), f4.width(), data);
    match h {
        Some(m) => m.apply(&sum),
        None => Ok(sum),
    }
}

/// alpha·f_attn + (1−alpha)·f_global, elementwise.
pub fn blend(f_attn: &FeatureMap, f_global: &FeatureMap, alpha: f64) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain {
            name: "alpha",
            value: alpha,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if (f_attn.channels(), f_attn.height(), f_attn.width())
        != (f_global.channels(), f_global.height(), f_global.width())
    {
        return Err(Error::ShapeMismatch(format!(
            "blend inputs {}x{}x{} vs {}x{}x{}",
            f_attn.channels(),
            f_attn.height(),
            f_attn.width(),
            f_global.channels(),
            f_global.height(),
            f_global.width()
        )));
    }
    let a = alpha as f32;
    let b = 1.0 - a;
    let data = f_attn
        .data()
        .iter()
        .zip(f_global.data())
        .map(|(&x, &y)| a * x + b * y)
        .collect();
    Ok(FeatureMap::from_raw(
        f_attn.channels(),
        f_attn.height(),
        f_attn.width(),
        data,
    ))
}
