//! Deterministic built-in encoder for model-free testing.
//!
//! Layer l applies a seeded 1x1 pointwise linear map followed by ReLU; a 2x2
//! non-overlapping average pool sits between consecutive taps. Because no
//! operation mixes values across 2^(depth-1)-aligned tile boundaries,
//! encoding commutes with tiling, which gives analytic repeatability cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Image};

use super::{FeaturePyramid, LayerTap};

pub struct TestEncoder {
    seed: u64,
    depth: u8,
    /// weights[l] is (C_out x C_in), row-major, for layer l+1.
    weights: Vec<Vec<f32>>,
}

impl TestEncoder {
    pub fn new(seed: u64, depth: u8) -> Result<Self> {
        if !(1..=5).contains(&depth) {
            return Err(Error::Domain {
                name: "depth",
                value: depth as f64,
                lo: 1.0,
                hi: 5.0,
            });
        }
        let mut weights = Vec::with_capacity(depth as usize);
        let mut c_in = Image::CHANNELS;
        for l in 1..=depth {
            let tap = LayerTap::new(l).expect("depth checked");
            let c_out = tap.channels();
            // Per-layer stream so depth-k prefixes of deeper encoders match.
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (l as u64).wrapping_mul(0x9E3779B97F4A7C15));
            let bound = (6.0 / (c_in + c_out) as f64).sqrt() as f32;
            let w: Vec<f32> = (0..c_out * c_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(w);
            c_in = c_out;
        }
        Ok(Self {
            seed,
            depth,
            weights,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn encode(&self, img: &Image, taps: &[LayerTap]) -> Result<FeaturePyramid> {
        if let Some(missing) = taps.iter().find(|t| t.index() > self.depth) {
            return Err(Error::MissingTap(missing.name().into()));
        }
        let deepest = taps.last().expect("caller checked nonempty").index();

        let mut current = img.to_feature_map();
        let mut out = Vec::with_capacity(taps.len());
        for l in 1..=deepest {
            if l > 1 {
                current = avg_pool2(&current);
            }
            current = pointwise_relu(&current, &self.weights[l as usize - 1], {
                let tap = LayerTap::new(l).expect("bounded");
                tap.channels()
            });
            let tap = LayerTap::new(l).expect("bounded");
            if taps.contains(&tap) {
                out.push((tap, current.clone()));
            }
        }
        FeaturePyramid::new(out, (img.height(), img.width()))
    }
}

/// out = relu(W · in) applied independently at each spatial position.
fn pointwise_relu(f: &FeatureMap, weights: &[f32], c_out: usize) -> FeatureMap {
    let c_in = f.channels();
    let plane = f.spatial_len();
    debug_assert_eq!(weights.len(), c_out * c_in);
    let mut data = vec![0f32; c_out * plane];
    for o in 0..c_out {
        let row = &weights[o * c_in..(o + 1) * c_in];
        let acc = &mut data[o * plane..(o + 1) * plane];
        for (i, &w) in row.iter().enumerate() {
            let src = f.channel(i);
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += w * v;
            }
        }
        for a in acc.iter_mut() {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
    }
    FeatureMap::from_raw(c_out, f.height(), f.width(), data)
}

/// 2x2 non-overlapping average pool; trailing odd rows/columns are dropped.
fn avg_pool2(f: &FeatureMap) -> FeatureMap {
    let (h, w) = (f.height() / 2, f.width() / 2);
    let mut data = vec![0f32; f.channels() * h * w];
    for c in 0..f.channels() {
        let src = f.channel(c);
        let dst = &mut data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let top = 2 * y * f.width() + 2 * x;
                let bot = top + f.width();
                dst[y * w + x] = (src[top] + src[top + 1] + src[bot] + src[bot + 1]) * 0.25;
            }
        }
    }
    FeatureMap::from_raw(f.channels(), h, w, data)
}
