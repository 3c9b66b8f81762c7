//! Batch pattern-repeatability analysis over an image directory.
//!
//! Per-image work fans out across a worker pool; aggregation always runs in
//! path-sorted order, so the report is byte-identical for any worker count.
//! Undecodable files are recorded, never fatal.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{resize, EncoderBackend};
use crate::error::{Error, Result};
use crate::repeatability::{pattern_repeatability, RepeatabilityConfig, RepeatabilityReport};
use crate::tensor::Image;

/// Histogram bin count for the alpha distribution (width 0.1 over [0, 1]).
pub const HISTOGRAM_BINS: usize = 10;

/// Published large-corpus statistics, reported alongside fresh runs for
/// comparison. Never asserted against computed values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceContext {
    pub dataset: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for ReferenceContext {
    fn default() -> Self {
        Self {
            dataset: "wikiart".into(),
            mean: 0.79,
            std: 0.1,
            min: 0.26,
            max: 0.97,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
    /// Images are resampled to this size before analysis; `None` keeps the
    /// original resolution.
    pub resize_to: Option<(usize, usize)>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            resize_to: Some((256, 256)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub path: String,
    #[serde(flatten)]
    pub report: RepeatabilityReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

/// Aggregate statistics over the decodable images of one directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: [u64; HISTOGRAM_BINS],
    pub skipped: Vec<SkippedFile>,
    pub reference: ReferenceContext,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusReport {
    pub summary: CorpusSummary,
    pub records: Vec<CorpusRecord>,
}

impl CorpusReport {
    /// One JSONL line per image, in path-sorted order.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// CSV rows (path, alpha_style, patch scale) with a header.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("path,alpha_style,s\n");
        for record in &self.records {
            out.push_str(&format!(
                "{},{},{}\n",
                record.path, record.report.alpha_style, record.report.patch_scale
            ));
        }
        out
    }
}

fn analyze_one(
    path: &Path,
    backend: &EncoderBackend,
    cfg: &RepeatabilityConfig,
    opts: &CorpusOptions,
) -> std::result::Result<RepeatabilityReport, String> {
    let img = Image::load(path).map_err(|e| e.to_string())?;
    let img = match opts.resize_to {
        Some((h, w)) => resize(&img, h, w),
        None => img,
    };
    pattern_repeatability(&img, backend, cfg).map_err(|e| e.to_string())
}

/// Analyzes every decodable image directly under `dir` (non-recursive).
pub fn analyze_corpus(
    dir: impl AsRef<Path>,
    backend: &EncoderBackend,
    cfg: &RepeatabilityConfig,
    opts: &CorpusOptions,
) -> Result<CorpusReport> {
    let dir = dir.as_ref();
    cfg.validate()?;

    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();

    let run = || {
        paths
            .par_iter()
            .map(|p| (p.clone(), analyze_one(p, backend, cfg, opts)))
            .collect::<Vec<_>>()
    };
    let outcomes = if opts.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    };

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (path, outcome) in outcomes {
        let path_str = path.display().to_string();
        match outcome {
            Ok(report) => records.push(CorpusRecord {
                path: path_str,
                report,
            }),
            Err(reason) => skipped.push(SkippedFile {
                path: path_str,
                reason,
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }

    let alphas: Vec<f64> = records.iter().map(|r| r.report.alpha_style).collect();
    let count = alphas.len();
    let mean = alphas.iter().sum::<f64>() / count as f64;
    let var = alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / count as f64;
    let min = alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = alphas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut histogram = [0u64; HISTOGRAM_BINS];
    for a in &alphas {
        let bin = ((a.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }

    Ok(CorpusReport {
        summary: CorpusSummary {
            count,
            mean,
            std: var.sqrt(),
            min,
            max,
            histogram,
            skipped,
            reference: ReferenceContext::default(),
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(h: usize, w: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::from_fn(h, w, |_, _, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
        .unwrap()
    }

    /// Image tiled r x r from one tile: fully repeatable under the test
    /// encoder when the tile is pooling-aligned.
    fn tiled_image(tile: &Image, r: usize) -> Image {
        let (th, tw) = (tile.height(), tile.width());
        Image::from_fn(th * r, tw * r, |c, y, x| tile.get(c, y % th, x % tw)).unwrap()
    }

    /// Quadrants drawn from independent noise with distinct channel mixes,
    /// so patch Grams disagree with each other and with the whole.
    fn quadrant_noise_image(side: usize, seed: u64) -> Image {
        let mixes: [[f32; 3]; 4] = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.4, 0.4, 0.2],
        ];
        let mut s = seed;
        let half = side / 2;
        Image::from_fn(side, side, |c, y, x| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (s >> 40) as f32 / (1u64 << 24) as f32;
            let q = (y / half).min(1) * 2 + (x / half).min(1);
            (mixes[q][c] * u).clamp(0.0, 1.0)
        })
        .unwrap()
    }

    fn write_corpus(dir: &Path, images: &[(String, Image)]) {
        for (name, img) in images {
            img.save_png(dir.join(name)).unwrap();
        }
    }

    #[test]
    fn identical_copies_have_zero_std() {
        let tmp = tempfile::tempdir().unwrap();
        let img = noise_image(48, 48, 1);
        write_corpus(
            tmp.path(),
            &[
                ("a.png".into(), img.clone()),
                ("b.png".into(), img.clone()),
                ("c.png".into(), img.clone()),
            ],
        );
        let backend = EncoderBackend::test(1, 2).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let opts = CorpusOptions {
            workers: 2,
            resize_to: None,
        };
        let report = analyze_corpus(tmp.path(), &backend, &cfg, &opts).unwrap();
        assert_eq!(report.summary.count, 3);
        assert_eq!(report.summary.std, 0.0);
        assert_eq!(report.summary.mean, report.records[0].report.alpha_style);
        assert_eq!(report.summary.histogram.iter().sum::<u64>(), 3);
    }

    #[test]
    fn tiled_corpus_scores_above_quadrant_noise() {
        let tmp = tempfile::tempdir().unwrap();
        let mut images = Vec::new();
        for i in 0..4u64 {
            let tile = noise_image(32, 32, 100 + i);
            images.push((format!("tiled_{i}.png"), tiled_image(&tile, 2)));
            images.push((format!("noise_{i}.png"), quadrant_noise_image(64, 200 + i)));
        }
        write_corpus(tmp.path(), &images);

        let backend = EncoderBackend::test(9, 3).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let opts = CorpusOptions {
            workers: 0,
            resize_to: None,
        };
        let report = analyze_corpus(tmp.path(), &backend, &cfg, &opts).unwrap();

        let mean_of = |prefix: &str| {
            let vals: Vec<f64> = report
                .records
                .iter()
                .filter(|r| r.path.contains(prefix))
                .map(|r| r.report.alpha_style)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let tiled = mean_of("tiled_");
        let noisy = mean_of("noise_");
        assert!(tiled > noisy, "tiled {tiled} vs quadrant noise {noisy}");
    }

    #[test]
    fn empty_directory_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let backend = EncoderBackend::test(0, 2).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        assert!(matches!(
            analyze_corpus(tmp.path(), &backend, &cfg, &CorpusOptions::default()),
            Err(Error::EmptyCorpus(_))
        ));
    }

    #[test]
    fn undecodable_files_are_skipped_not_fatal() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("junk.png"), b"not an image").unwrap();
        write_corpus(tmp.path(), &[("ok.png".into(), noise_image(48, 48, 5))]);

        let backend = EncoderBackend::test(3, 2).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let opts = CorpusOptions {
            workers: 0,
            resize_to: None,
        };
        let report = analyze_corpus(tmp.path(), &backend, &cfg, &opts).unwrap();
        assert_eq!(report.summary.count, 1);
        assert_eq!(report.summary.skipped.len(), 1);
        assert!(report.summary.skipped[0].path.contains("junk.png"));
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let tmp = tempfile::tempdir().unwrap();
        let images: Vec<(String, Image)> = (0..6)
            .map(|i| (format!("img_{i}.png"), noise_image(48, 48, 50 + i)))
            .collect();
        write_corpus(tmp.path(), &images);

        let backend = EncoderBackend::test(7, 2).unwrap();
        let cfg = RepeatabilityConfig {
            pair_probability: 0.5,
            seed: 11,
            ..RepeatabilityConfig::for_backend(&backend)
        };
        let run = |workers| {
            let opts = CorpusOptions {
                workers,
                resize_to: None,
            };
            let report = analyze_corpus(tmp.path(), &backend, &cfg, &opts).unwrap();
            (
                serde_json::to_string(&report.summary).unwrap(),
                report.records_jsonl(),
                report.records_csv(),
            )
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn resize_option_changes_analysis_size() {
        let tmp = tempfile::tempdir().unwrap();
        write_corpus(tmp.path(), &[("big.png".into(), noise_image(96, 64, 77))]);
        let backend = EncoderBackend::test(5, 2).unwrap();
        let cfg = RepeatabilityConfig::for_backend(&backend);
        let opts = CorpusOptions {
            workers: 0,
            resize_to: Some((48, 48)),
        };
        // succeeds because 48x48 is above the encoder minimum
        let report = analyze_corpus(tmp.path(), &backend, &cfg, &opts).unwrap();
        assert_eq!(report.summary.count, 1);
    }
}
