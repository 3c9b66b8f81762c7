//! Pattern repeatability: how strongly the local patches of an image repeat
//! its global texture.
//!
//! Two views are fused: intra-image repeatability (each patch Gram against
//! the whole-feature Gram) and inter-patch repeatability (patch Grams against
//! each other, optionally pair-sampled). Both are computed on the RGB image
//! and its grayscale, and the four components average into `alpha_style`.
//! The derived patch scale drives the patch-wise style loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderBackend, FeaturePyramid, LayerTap};
use crate::error::{Error, Result};
use crate::tensor::{gram, gram_cosine, patchify_features, GramMatrix, Image};

/// Knobs for [`pattern_repeatability`]. The encoder backend is passed
/// alongside so one immutable backend can serve many configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatabilityConfig {
    /// Patch grid ratio r (N = r² patches per tap).
    pub ratio: u32,
    /// Probability of drawing each unordered patch pair, in (0, 1].
    pub pair_probability: f64,
    /// Seed for the pair-sampling RNG.
    pub seed: u64,
    /// Taps entering the per-layer averages.
    pub taps: Vec<LayerTap>,
}

impl Default for RepeatabilityConfig {
    fn default() -> Self {
        Self {
            ratio: 2,
            pair_probability: 1.0,
            seed: 0,
            taps: LayerTap::ALL.to_vec(),
        }
    }
}

impl RepeatabilityConfig {
    /// Default config restricted to the taps the backend can produce.
    pub fn for_backend(backend: &EncoderBackend) -> Self {
        Self {
            taps: backend.available_taps(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(Error::Domain {
                name: "ratio",
                value: self.ratio as f64,
                lo: 2.0,
                hi: f64::INFINITY,
            });
        }
        if !(self.pair_probability > 0.0 && self.pair_probability <= 1.0) {
            return Err(Error::Domain {
                name: "pair_probability",
                value: self.pair_probability,
                lo: f64::MIN_POSITIVE,
                hi: 1.0,
            });
        }
        if self.taps.is_empty() {
            return Err(Error::NoValidTap);
        }
        Ok(())
    }
}

/// Config echo carried inside serialized reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub r: u32,
    pub p: f64,
    pub seed: u64,
    pub taps: Vec<LayerTap>,
    pub backend: String,
}

impl ConfigEcho {
    pub fn new(cfg: &RepeatabilityConfig, backend: &EncoderBackend) -> Self {
        Self {
            r: cfg.ratio,
            p: cfg.pair_probability,
            seed: cfg.seed,
            taps: cfg.taps.clone(),
            backend: backend.describe(),
        }
    }
}

/// The four repeatability components, their fusion, and the derived patch
/// scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatabilityReport {
    pub alpha_intra_rgb: f64,
    pub alpha_inter_rgb: f64,
    pub alpha_intra_gray: f64,
    pub alpha_inter_gray: f64,
    pub alpha_style: f64,
    pub patch_scale: u32,
    pub config: ConfigEcho,
}

/// Similarity under the zero-norm policy: a blank patch does not repeat any
/// style, so it contributes 0 instead of failing.
fn cosine_or_zero(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    match gram_cosine(a, b) {
        Ok(v) => Ok(v),
        Err(Error::ZeroNormGram) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Mean over taps of the mean patch-vs-whole Gram cosine (plain Grams).
/// Taps too small for the grid are skipped; if every tap is skipped the
/// result is `NoValidTap`.
pub fn alpha_intra(pyr: &FeaturePyramid, ratio: u32) -> Result<f64> {
    let mut per_tap = Vec::with_capacity(pyr.taps().len());
    for (_, map) in pyr.taps() {
        let patches = match patchify_features(map, ratio) {
            Ok(p) => p,
            Err(Error::PatchTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        let whole = gram(map, false);
        let mut acc = 0f64;
        for patch in &patches {
            acc += cosine_or_zero(&gram(patch, false), &whole)?;
        }
        per_tap.push(acc / patches.len() as f64);
    }
    if per_tap.is_empty() {
        return Err(Error::NoValidTap);
    }
    Ok(per_tap.iter().sum::<f64>() / per_tap.len() as f64)
}

/// Mean over taps of the mean pairwise patch-Gram cosine. Each of the
/// C(N,2) unordered pairs is drawn independently with probability `p`
/// (seeded); an empty draw falls back to all pairs.
pub fn alpha_inter(pyr: &FeaturePyramid, ratio: u32, p: f64, seed: u64) -> Result<f64> {
    if ratio < 2 {
        return Err(Error::Domain {
            name: "ratio",
            value: ratio as f64,
            lo: 2.0,
            hi: f64::INFINITY,
        });
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain {
            name: "pair_probability",
            value: p,
            lo: f64::MIN_POSITIVE,
            hi: 1.0,
        });
    }
    let mut per_tap = Vec::with_capacity(pyr.taps().len());
    for (tap, map) in pyr.taps() {
        let patches = match patchify_features(map, ratio) {
            Ok(p) => p,
            Err(Error::PatchTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        let grams: Vec<GramMatrix> = patches.iter().map(|p| gram(p, false)).collect();
        let n = grams.len();

        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
        if p >= 1.0 {
            for i in 0..n {
                for j in (i + 1)..n {
                    pairs.push((i, j));
                }
            }
        } else {
            // Per-tap stream keeps the draw independent of other taps.
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (tap.index() as u64).wrapping_mul(0xD1B54A32D192ED03),
            );
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random::<f64>() < p {
                        pairs.push((i, j));
                    }
                }
            }
            if pairs.is_empty() {
                for i in 0..n {
                    for j in (i + 1)..n {
                        pairs.push((i, j));
                    }
                }
            }
        }

        let mut acc = 0f64;
        for &(i, j) in &pairs {
            acc += cosine_or_zero(&grams[i], &grams[j])?;
        }
        per_tap.push(acc / pairs.len() as f64);
    }
    if per_tap.is_empty() {
        return Err(Error::NoValidTap);
    }
    Ok(per_tap.iter().sum::<f64>() / per_tap.len() as f64)
}

/// Patch grid side for the patch-wise style loss:
/// s = max(2^(8·alpha − 5), 1), rounded to the nearest integer.
pub fn patch_scale(alpha: f64) -> Result<u32> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain {
            name: "alpha",
            value: alpha,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let s = 2f64.powf(8.0 * alpha - 5.0).max(1.0).round() as u32;
    Ok(s.max(1))
}

/// Full repeatability analysis of one image: RGB and grayscale components,
/// their fused mean, and the derived patch scale.
pub fn pattern_repeatability(
    img: &Image,
    backend: &EncoderBackend,
    cfg: &RepeatabilityConfig,
) -> Result<RepeatabilityReport> {
    cfg.validate()?;
    let rgb = backend.encode(img, &cfg.taps)?;
    let gray = backend.encode(&img.to_grayscale(), &cfg.taps)?;

    let alpha_intra_rgb = alpha_intra(&rgb, cfg.ratio)?;
    let alpha_inter_rgb = alpha_inter(&rgb, cfg.ratio, cfg.pair_probability, cfg.seed)?;
    let alpha_intra_gray = alpha_intra(&gray, cfg.ratio)?;
    let alpha_inter_gray = alpha_inter(&gray, cfg.ratio, cfg.pair_probability, cfg.seed)?;

    let alpha_style =
        (alpha_intra_rgb + alpha_inter_rgb + alpha_intra_gray + alpha_inter_gray) / 4.0;

    Ok(RepeatabilityReport {
        alpha_intra_rgb,
        alpha_inter_rgb,
        alpha_intra_gray,
        alpha_inter_gray,
        alpha_style,
        patch_scale: patch_scale(alpha_style.clamp(0.0, 1.0))?,
        config: ConfigEcho::new(cfg, backend),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMap;

    /// Single-tap pyramid wrapping raw feature data, for hand cases.
    fn single_tap(c: usize, h: usize, w: usize, data: &[f32]) -> FeaturePyramid {
        let map = FeatureMap::new(c, h, w, data.to_vec()).unwrap();
        FeaturePyramid::new(vec![(LayerTap::new(1).unwrap(), map)], (h, w)).unwrap()
    }

    /// All-pairs mean cosine, written independently of the sampling path.
    fn all_pairs_oracle(pyr: &FeaturePyramid, ratio: u32) -> f64 {
        let mut tap_means = Vec::new();
        for (_, map) in pyr.taps() {
            let Ok(patches) = patchify_features(map, ratio) else {
                continue;
            };
            let grams: Vec<GramMatrix> = patches.iter().map(|p| gram(p, false)).collect();
            let mut total = 0f64;
            let mut count = 0usize;
            for i in 0..grams.len() {
                for j in (i + 1)..grams.len() {
                    total += gram_cosine(&grams[i], &grams[j]).unwrap_or(0.0);
                    count += 1;
                }
            }
            tap_means.push(total / count as f64);
        }
        tap_means.iter().sum::<f64>() / tap_means.len() as f64
    }

    fn random_pyramid(seed: u64, c: usize, h: usize, w: usize) -> FeaturePyramid {
        let mut s = seed;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        };
        let data: Vec<f32> = (0..c * h * w).map(|_| next()).collect();
        single_tap(c, h, w, &data)
    }

    // Hand case: C=2, 2x2, channel 1 = [[1,0],[0,0]], channel 2 = [[0,1],[0,0]].
    // With r=2 the four 1x1 patches have Grams [[1,0],[0,0]], [[0,0],[0,1]],
    // 0, 0 while the whole Gram is I/4, so the patch cosines are 1/sqrt(2),
    // 1/sqrt(2), 0, 0.
    const HAND: [f32; 8] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];

    #[test]
    fn alpha_intra_hand_case() {
        let pyr = single_tap(2, 2, 2, &HAND);
        let a = alpha_intra(&pyr, 2).unwrap();
        let expect = 2.0 / (4.0 * 2f64.sqrt());
        assert!((a - expect).abs() < 1e-9, "{a} vs {expect}");
        assert!((a - 0.35355).abs() < 1e-5);
    }

    #[test]
    fn alpha_inter_hand_case() {
        // The only pair of nonzero patch Grams is orthogonal; every pair that
        // touches a zero patch contributes 0 by policy.
        let pyr = single_tap(2, 2, 2, &HAND);
        let a = alpha_inter(&pyr, 2, 1.0, 0).unwrap();
        assert!(a.abs() < 1e-9);
    }

    #[test]
    fn constant_features_are_fully_repeatable() {
        let data = vec![0.7f32; 3 * 4 * 4];
        let pyr = single_tap(3, 4, 4, &data);
        assert!((alpha_intra(&pyr, 2).unwrap() - 1.0).abs() < 1e-9);
        assert!((alpha_inter(&pyr, 2, 1.0, 9).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_taps_too_small_is_no_valid_tap() {
        let pyr = single_tap(2, 2, 2, &HAND);
        assert!(matches!(alpha_intra(&pyr, 3), Err(Error::NoValidTap)));
        assert!(matches!(
            alpha_inter(&pyr, 3, 1.0, 0),
            Err(Error::NoValidTap)
        ));
    }

    #[test]
    fn full_probability_matches_all_pairs_oracle() {
        for seed in 0..10u64 {
            let pyr = random_pyramid(seed, 3, 8, 8);
            let sampled = alpha_inter(&pyr, 2, 1.0, seed).unwrap();
            let oracle = all_pairs_oracle(&pyr, 2);
            assert!((sampled - oracle).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn sampling_is_unbiased_across_seeds() {
        let pyr = random_pyramid(42, 3, 12, 12);
        let exact = alpha_inter(&pyr, 3, 1.0, 0).unwrap();
        let draws: Vec<f64> = (0..200)
            .map(|s| alpha_inter(&pyr, 3, 0.5, s).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        let se = (var / draws.len() as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se.max(1e-12),
            "mean {mean}, exact {exact}, se {se}"
        );
    }

    #[test]
    fn sampling_deterministic_per_seed() {
        let pyr = random_pyramid(7, 2, 8, 8);
        let a = alpha_inter(&pyr, 2, 0.4, 123).unwrap();
        let b = alpha_inter(&pyr, 2, 0.4, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patch_scale_table() {
        assert_eq!(patch_scale(1.0).unwrap(), 8);
        assert_eq!(patch_scale(0.625).unwrap(), 1);
        assert_eq!(patch_scale(0.5).unwrap(), 1);
        assert_eq!(patch_scale(0.85).unwrap(), 3);
        assert_eq!(patch_scale(0.0).unwrap(), 1);
        assert!(matches!(patch_scale(-0.1), Err(Error::Domain { .. })));
        assert!(matches!(patch_scale(1.2), Err(Error::Domain { .. })));
    }

    #[test]
    fn constant_image_report() {
        let backend = EncoderBackend::test(5, 3).unwrap();
        let img = Image::constant(64, 64, [0.5, 0.5, 0.5]).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let report = pattern_repeatability(&img, &backend, &cfg).unwrap();
        for comp in [
            report.alpha_intra_rgb,
            report.alpha_inter_rgb,
            report.alpha_intra_gray,
            report.alpha_inter_gray,
        ] {
            assert!((comp - 1.0).abs() < 1e-9, "component {comp}");
        }
        assert!((report.alpha_style - 1.0).abs() < 1e-9);
        assert_eq!(report.patch_scale, 8);
    }

    #[test]
    fn gray_input_collapses_components() {
        let backend = EncoderBackend::test(11, 2).unwrap();
        let mut s = 33u64;
        let img = Image::from_fn(48, 48, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .unwrap()
        .to_grayscale();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let report = pattern_repeatability(&img, &backend, &cfg).unwrap();
        assert!((report.alpha_intra_rgb - report.alpha_intra_gray).abs() < 1e-7);
        assert!((report.alpha_inter_rgb - report.alpha_inter_gray).abs() < 1e-7);
    }

    #[test]
    fn report_is_deterministic() {
        let backend = EncoderBackend::test(3, 3).unwrap();
        let mut s = 1u64;
        let img = Image::from_fn(64, 64, |_, _, _| {
            s = s.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .unwrap();
        let cfg = RepeatabilityConfig {
            pair_probability: 0.5,
            seed: 17,
            ..RepeatabilityConfig::for_backend(&backend)
        };
        let a = pattern_repeatability(&img, &backend, &cfg).unwrap();
        let b = pattern_repeatability(&img, &backend, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn report_json_keys() {
        let backend = EncoderBackend::test(0, 2).unwrap();
        let img = Image::constant(32, 32, [0.4, 0.4, 0.4]).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let report = pattern_repeatability(&img, &backend, &cfg).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        for key in [
            "alpha_intra_rgb",
            "alpha_inter_rgb",
            "alpha_intra_gray",
            "alpha_inter_gray",
            "alpha_style",
            "patch_scale",
            "config",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["config"]["backend"], "test:0:2");
    }
}
