//! Evaluation on a test split and inference with heatmap emission.
//!
//! Neither path synthesizes anomalies: test features go straight to the model.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureExtractor, ImageTensor};
use crate::checkpoint::Checkpoint;
use crate::config::{AblationFlags, RunConfig};
use crate::dataset::{load_dataset, load_mask};
use crate::error::{Error, Result};
use crate::metrics::{detection_metrics, DetectionMetrics, Granularity, ScoredSet};
use crate::model::{Inference, UraNet};

pub const RESULTS_FILE: &str = "results.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const RESULTS_VERSION: u32 = 1;
pub const DECISION_RULE: &str = "anomalous iff score >= threshold";

/// One row of a score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub path: String,
    pub score: f64,
    /// 1 anomalous, 0 normal; empty when unknown (inference).
    pub label: Option<u8>,
}

/// The results document. Wall-clock timing lives in a separate file so that
/// identical runs produce identical documents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub version: u32,
    pub category: String,
    pub seed: u64,
    pub eval_seed: u64,
    pub trained_steps: u64,
    pub ablation: AblationFlags,
    pub n_test: usize,
    pub n_anomalous: usize,
    pub image: DetectionMetrics,
    /// Absent when some anomalous test image has no mask.
    pub pixel: Option<DetectionMetrics>,
    pub decision_rule: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub images: usize,
    pub total_seconds: f64,
    pub ms_per_image: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub results: Results,
    pub scores: Vec<ScoreRow>,
    pub timing: Timing,
}

/// Seed for the perception draws of the `index`-th image.
pub fn image_seed(eval_seed: u64, index: usize) -> u64 {
    eval_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Scores one image at `out_hw` resolution.
pub fn score_image(
    model: &UraNet,
    extractor: &FeatureExtractor,
    image: &ImageTensor,
    out_hw: (usize, usize),
    seed: u64,
) -> Result<Inference> {
    let f = extractor.extract(image, model.config.feature_size)?;
    model.infer(&f, out_hw, seed)
}

/// Evaluates `model` on the test split described by `config.dataset`.
pub fn evaluate_model(model: &UraNet, config: &RunConfig, trained_steps: u64) -> Result<Evaluation> {
    let ds = &config.dataset;
    let index = load_dataset(&ds.root, ds.layout, &ds.category, ds.pixel_eval)?;
    let extractor = FeatureExtractor::new(&config.backbone)?;
    let side = ds.image_size;
    let start = Instant::now();
    let mut image_set = ScoredSet::empty(Granularity::Image);
    let mut pixel_set = ScoredSet::empty(Granularity::Pixel);
    let mut pixel_ok = true;
    let mut scores = Vec::new();
    let test: Vec<_> = index.test().collect();
    for (i, rec) in test.iter().enumerate() {
        let img = ImageTensor::load(&rec.path, side)?;
        let inf = score_image(model, &extractor, &img, (side, side), image_seed(config.eval.seed, i))?;
        image_set.push(inf.map.image_score, rec.anomalous)?;
        scores.push(ScoreRow {
            path: rec.path.display().to_string(),
            score: inf.map.image_score,
            label: Some(rec.anomalous as u8),
        });
        let gt = match (&rec.mask, rec.anomalous) {
            (Some(m), _) => Some(load_mask(m, side)?),
            (None, false) => Some(Array2::zeros((side, side))),
            (None, true) => None,
        };
        match gt {
            Some(gt) if pixel_ok => {
                let labels: Vec<bool> = gt.iter().map(|&v| v > 0.5).collect();
                let px = ScoredSet::new(inf.map.pixel_scores.iter().copied().collect(), labels, Granularity::Pixel)?;
                pixel_set.merge(&px)?;
            }
            Some(_) => {}
            None => pixel_ok = false,
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let image = detection_metrics(&image_set)?;
    let pixel = if pixel_ok { Some(detection_metrics(&pixel_set)?) } else { None };
    Ok(Evaluation {
        results: Results {
            version: RESULTS_VERSION,
            category: ds.category.clone(),
            seed: config.seed,
            eval_seed: config.eval.seed,
            trained_steps,
            ablation: config.ablation.clone(),
            n_test: test.len(),
            n_anomalous: test.iter().filter(|r| r.anomalous).count(),
            image,
            pixel,
            decision_rule: DECISION_RULE.into(),
        },
        scores,
        timing: Timing {
            images: test.len(),
            total_seconds: elapsed,
            ms_per_image: 1e3 * elapsed / test.len().max(1) as f64,
        },
    })
}

/// Evaluates a checkpoint on its configured dataset.
pub fn evaluate(checkpoint: &Checkpoint) -> Result<Evaluation> {
    evaluate_model(&checkpoint.model, &checkpoint.config, checkpoint.step)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_scores(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `results.json`, `scores.csv` and `timing.json` into `out_dir`.
pub fn write_evaluation(eval: &Evaluation, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    write_json(&eval.results, &out_dir.join(RESULTS_FILE))?;
    write_scores(&eval.scores, &out_dir.join(SCORES_FILE))?;
    write_json(&eval.timing, &out_dir.join(TIMING_FILE))
}

pub fn read_results(path: &Path) -> Result<Results> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// Jet-style colour ramp for `t` in `[0, 1]`.
fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Heatmap scaled by the map's own maximum (a zero map renders uniformly blue).
pub fn heatmap(scores: &Array2<f64>) -> RgbImage {
    let (h, w) = scores.dim();
    let max = scores.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(jet(scores[[y as usize, x as usize]] * scale)))
}

/// Row-per-line CSV of the raw pixel scores, no header.
pub fn write_matrix(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut text = String::with_capacity(m.len() * 20);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<_, _>>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Dataset(format!("{}: ragged matrix", path.display())));
    }
    let h = rows.len();
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Default)]
pub struct InferReport {
    pub rows: Vec<ScoreRow>,
    /// Inputs that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Scores each image at its own resolution and writes `<stem>_heatmap.png`,
/// `<stem>_scores.csv` and a combined `scores.csv` into `out_dir`.
/// Unreadable images are skipped with a warning and reported.
pub fn infer(checkpoint: &Checkpoint, images: &[PathBuf], out_dir: &Path) -> Result<InferReport> {
    let config = &checkpoint.config;
    let extractor = FeatureExtractor::new(&config.backbone)?;
    create_dir(out_dir)?;
    let mut report = InferReport::default();
    for (i, path) in images.iter().enumerate() {
        let (w, h) = match image::image_dimensions(path) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let img = match ImageTensor::load(path, config.dataset.image_size) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let inf = score_image(
            &checkpoint.model,
            &extractor,
            &img,
            (h as usize, w as usize),
            image_seed(config.eval.seed, i),
        )?;
        let stem = format!(
            "{i:04}_{}",
            path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
        );
        let heat = out_dir.join(format!("{stem}_heatmap.png"));
        heatmap(&inf.map.pixel_scores)
            .save(&heat)
            .map_err(|e| Error::Image { path: heat, source: e })?;
        write_matrix(&inf.map.pixel_scores, &out_dir.join(format!("{stem}_scores.csv")))?;
        report.rows.push(ScoreRow {
            path: path.display().to_string(),
            score: inf.map.image_score,
            label: None,
        });
    }
    write_scores(&report.rows, &out_dir.join(SCORES_FILE))?;
    Ok(report)
}
