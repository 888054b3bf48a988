//! Dumps training-time synthetic anomalies for inspection.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Synthesis};
use crate::error::{Error, Result};
use crate::eval::heatmap;
use crate::fasm::AnomalyMask;
use crate::train::Trainer;

pub const SYNTHESIS_INDEX: &str = "synthesis.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSample {
    pub index: usize,
    pub step: u64,
    pub normal_id: usize,
    pub source_id: usize,
    /// Fraction of mask cells set.
    pub mask_area: f64,
    /// Fraction of tokens labelled anomalous.
    pub token_fraction: f64,
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Normal image with mask cells (nearest-neighbour upscaled) tinted red.
fn overlay(normal: &RgbImage, mask: &AnomalyMask) -> RgbImage {
    let (mh, mw) = mask.dim();
    let (w, h) = normal.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = normal.get_pixel(x, y).0;
        let my = y as usize * mh / h as usize;
        let mx = x as usize * mw / w as usize;
        if mask.values()[[my, mx]] == 1.0 {
            Rgb([255, (p[1] as f64 * 0.4) as u8, (p[2] as f64 * 0.4) as u8])
        } else {
            Rgb(p)
        }
    })
}

/// Writes `count` synthetic pairs as drawn by the training sampler:
/// `NNN_normal.png`, `NNN_source.png`, `NNN_overlay.png` (mask over the normal
/// image) and `NNN_delta.png` (per-cell feature change), plus `synthesis.csv`.
pub fn dump_synthesis(config: &RunConfig, count: usize, out_dir: &Path) -> Result<Vec<SynthesisSample>> {
    if config.ablation.synthesis() == Synthesis::None {
        return Err(Error::Config("synthesis is disabled for this variant".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let trainer = Trainer::new(config.clone())?;
    let mut samples = Vec::with_capacity(count);
    let mut step = 0;
    while samples.len() < count {
        let sb = trainer.sample_batch(step)?;
        for i in 0..sb.batch.len() {
            if samples.len() == count {
                break;
            }
            let index = samples.len();
            let (nid, sid) = (sb.normal_ids[i], sb.source_ids[i]);
            let normal = trainer.data().normals[nid].to_rgb8();
            let mask = &sb.masks[i];
            save(&normal, &out_dir.join(format!("{index:03}_normal.png")))?;
            save(&trainer.data().sources[sid].to_rgb8(), &out_dir.join(format!("{index:03}_source.png")))?;
            save(&overlay(&normal, mask), &out_dir.join(format!("{index:03}_overlay.png")))?;
            let (f_n, f_sa) = (&sb.batch.f_n[i], &sb.batch.f_sa[i]);
            let (h, w, _) = f_n.dim();
            let delta = Array2::from_shape_fn((h, w), |(y, x)| {
                let a = f_n.data().slice(ndarray::s![y, x, ..]);
                let b = f_sa.data().slice(ndarray::s![y, x, ..]);
                a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
            });
            save(&heatmap(&delta), &out_dir.join(format!("{index:03}_delta.png")))?;
            samples.push(SynthesisSample {
                index,
                step,
                normal_id: nid,
                source_id: sid,
                mask_area: mask.area_fraction(),
                token_fraction: sb.batch.g_sa[i].mean().unwrap_or(0.0),
            });
        }
        step += 1;
    }
    let path = out_dir.join(SYNTHESIS_INDEX);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    for s in &samples {
        w.serialize(s).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(samples)
}
