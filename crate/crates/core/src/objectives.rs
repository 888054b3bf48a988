//! Reconstruction losses and test-time anomaly maps.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{resize_bilinear, FeatureMap};
use crate::error::{Error, Result};
use crate::uiapm::mean_and_std;

/// Lower clamp for vector norms in cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

/// Per-step loss terms. `l_final = l_rec + l_aux`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_local_mse: f64,
    pub l_local_cos: f64,
    pub l_global: f64,
    pub l_rec: f64,
    pub l_dis: f64,
    pub l_kl: f64,
    pub l_aux: f64,
    pub l_final: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_local_mse,
            self.l_local_cos,
            self.l_global,
            self.l_rec,
            self.l_dis,
            self.l_kl,
            self.l_aux,
            self.l_final,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Graph nodes for the three reconstruction terms over stacked spatial rows
/// (`batch` maps of equal size, one row per position).
#[derive(Clone, Copy, Debug)]
pub struct RecTerms {
    pub local_mse: Var,
    pub local_cos: Var,
    pub global: Var,
    pub total: Var,
}

pub fn reconstruction_terms(g: &mut Graph, target: Var, hat: Var, batch: usize) -> RecTerms {
    let d = g.row_sq_dist(hat, target);
    let local_mse = g.mean(d);
    let c = g.row_cosine(hat, target, COSINE_EPS);
    let c = g.mean(c);
    let local_cos = one_minus(g, c);
    let rows = g.shape(target).0 / batch;
    let sims: Vec<Var> = (0..batch)
        .map(|b| {
            let t = g.slice_rows(target, b * rows, rows);
            let h = g.slice_rows(hat, b * rows, rows);
            g.flat_cosine(h, t, COSINE_EPS)
        })
        .collect();
    let s = if batch == 1 { sims[0] } else { g.concat_rows(&sims) };
    let s = g.mean(s);
    let global = one_minus(g, s);
    let partial = g.add(local_mse, local_cos);
    let total = g.add(partial, global);
    RecTerms {
        local_mse,
        local_cos,
        global,
        total,
    }
}

fn one_minus(g: &mut Graph, x: Var) -> Var {
    let one = g.constant(Array2::ones((1, 1)));
    g.sub(one, x)
}

fn check_pair(f_target: &FeatureMap, f_hat: &FeatureMap, op: &'static str) -> Result<()> {
    if f_target.dim() != f_hat.dim() {
        return Err(Error::shape(op, format!("{:?}", f_target.dim()), format!("{:?}", f_hat.dim())));
    }
    Ok(())
}

fn terms(f_target: &FeatureMap, f_hat: &FeatureMap, op: &'static str) -> Result<(Graph, RecTerms)> {
    check_pair(f_target, f_hat, op)?;
    let mut g = Graph::new();
    let t = g.constant(f_target.to_rows());
    let h = g.constant(f_hat.to_rows());
    let terms = reconstruction_terms(&mut g, t, h, 1);
    Ok((g, terms))
}

/// Spatial mean of `‖F̂ − F‖²` over channel vectors.
pub fn local_mse_loss(f_target: &FeatureMap, f_hat: &FeatureMap) -> Result<f64> {
    let (g, t) = terms(f_target, f_hat, "local_mse_loss")?;
    Ok(g.scalar(t.local_mse))
}

/// Spatial mean of `1 − cos(F̂, F)` over channel vectors.
pub fn local_cos_loss(f_target: &FeatureMap, f_hat: &FeatureMap) -> Result<f64> {
    let (g, t) = terms(f_target, f_hat, "local_cos_loss")?;
    Ok(g.scalar(t.local_cos))
}

/// `1 − cos` of the flattened maps.
pub fn global_cos_loss(f_target: &FeatureMap, f_hat: &FeatureMap) -> Result<f64> {
    let (g, t) = terms(f_target, f_hat, "global_cos_loss")?;
    Ok(g.scalar(t.global))
}

pub fn reconstruction_loss(f_target: &FeatureMap, f_hat: &FeatureMap) -> Result<f64> {
    let (g, t) = terms(f_target, f_hat, "reconstruction_loss")?;
    Ok(g.scalar(t.total))
}

pub fn joint_loss(l_rec: f64, l_aux: f64) -> f64 {
    l_rec + l_aux
}

/// Pixel-resolution anomaly scores and the image score (their population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub pixel_scores: Array2<f64>,
    pub image_score: f64,
}

impl AnomalyMap {
    pub fn new(pixel_scores: Array2<f64>) -> Result<Self> {
        if pixel_scores.is_empty() {
            return Err(Error::EmptyInput("anomaly map"));
        }
        if let Some(&bad) = pixel_scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!("anomaly scores must be finite and non-negative, found {bad}")));
        }
        let image_score = image_score(&pixel_scores);
        Ok(Self {
            pixel_scores,
            image_score,
        })
    }
}

/// Population standard deviation over all pixels.
pub fn image_score(pixel_scores: &Array2<f64>) -> f64 {
    mean_and_std(pixel_scores.iter().copied()).1
}

/// Per-position `AS_mse ⊙ AS_cos` at feature resolution.
pub fn position_scores(f_in: &FeatureMap, f_hat: &FeatureMap) -> Result<Array2<f64>> {
    check_pair(f_in, f_hat, "anomaly_map")?;
    let (h, w, _) = f_in.dim();
    let mut g = Graph::new();
    let a = g.constant(f_in.to_rows());
    let b = g.constant(f_hat.to_rows());
    let mse = g.row_sq_dist(a, b);
    let cos = g.row_cosine(a, b, COSINE_EPS);
    let scores = g
        .value(mse)
        .iter()
        .zip(g.value(cos).iter())
        // Rounding can push the cosine a hair past ±1.
        .map(|(&m, &c)| m * (1.0 - c).clamp(0.0, 2.0))
        .collect::<Vec<_>>();
    Ok(Array2::from_shape_vec((h, w), scores).expect("one score per position"))
}

/// Bilinear upscaling of position scores to `out_hw`, then the image score.
pub fn anomaly_map(f_in: &FeatureMap, f_hat: &FeatureMap, out_hw: (usize, usize)) -> Result<AnomalyMap> {
    if out_hw.0 == 0 || out_hw.1 == 0 {
        return Err(Error::InvalidParameter(format!("output size must be positive, got {out_hw:?}")));
    }
    let scores = position_scores(f_in, f_hat)?;
    AnomalyMap::new(upsample(&scores, out_hw))
}

pub fn upsample(scores: &Array2<f64>, out_hw: (usize, usize)) -> Array2<f64> {
    let cube: Array3<f64> = scores.clone().insert_axis(Axis(2));
    resize_bilinear(cube.view(), out_hw.0, out_hw.1)
        .index_axis_move(Axis(2), 0)
        // Interpolating non-negative values stays non-negative up to rounding.
        .mapv(|v| v.max(0.0))
}
