//! Feature-level anomaly synthesis.
//!
//! A Perlin-noise blob mask selects where features of an (augmented)
//! anomaly-source image replace features of an (augmented) normal image. The
//! mask is generated directly at feature resolution. Max-pooling it over
//! `K × K` patches gives the per-token ground truth used by the perception head.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, Zip};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, ImageTensor};
use crate::error::{Error, Result};

static SYNTHESIS_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`synthesize_features`] calls made by this process.
pub fn synthesis_calls() -> u64 {
    SYNTHESIS_CALLS.load(Ordering::Relaxed)
}

/// Binary spatial mask, `1` marking the synthetic anomalous region.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMask {
    values: Array2<f64>,
}

impl AnomalyMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(&bad) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(bad));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            values: Array2::ones((height, width)),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Fraction of cells set to 1.
    pub fn area_fraction(&self) -> f64 {
        self.values.sum() / self.values.len() as f64
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Max-pools by an integer factor (used to bring image-resolution masks to
    /// feature resolution).
    pub fn max_pool(&self, factor: usize) -> Result<Self> {
        let (h, w) = self.dim();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::NotDivisible {
                what: "mask",
                dims: format!("{h}x{w}"),
                patch: factor,
            });
        }
        let values = Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
            let patch = self
                .values
                .slice(ndarray::s![y * factor..(y + 1) * factor, x * factor..(x + 1) * factor]);
            if patch.iter().any(|&v| v == 1.0) {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self { values })
    }
}

/// Perlin mask parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerlinParams {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of lattice resolutions; both ends powers of two.
    pub scale_range: (usize, usize),
    /// Cut applied to min-max normalized noise; cells above it are anomalous.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for PerlinParams {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            scale_range: (2, 8),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl PerlinParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "perlin threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !lo.is_power_of_two() || !hi.is_power_of_two() || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "perlin scale range must be ordered powers of two, got ({lo}, {hi})"
            )));
        }
        if self.height == 0 || self.width == 0 || self.height % hi != 0 || self.width % hi != 0 {
            return Err(Error::InvalidParameter(format!(
                "perlin mask {}x{} must be divisible by the largest lattice resolution {hi}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Raw 2-D Perlin gradient noise over a `res_y × res_x` lattice.
fn perlin_field(height: usize, width: usize, res_y: usize, res_x: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let grads = Array2::from_shape_fn((res_y + 1, res_x + 1), |_| {
        let angle = 2.0 * PI * rng.random::<f64>();
        (angle.cos(), angle.sin())
    });
    let (cell_y, cell_x) = (height / res_y, width / res_x);
    Array2::from_shape_fn((height, width), |(i, j)| {
        let gy = i as f64 * res_y as f64 / height as f64;
        let gx = j as f64 * res_x as f64 / width as f64;
        let (fy, fx) = (gy.fract(), gx.fract());
        let (ly, lx) = (i / cell_y, j / cell_x);
        let dot = |dy: usize, dx: usize| {
            let (gyv, gxv) = grads[[ly + dy, lx + dx]];
            (fy - dy as f64) * gyv + (fx - dx as f64) * gxv
        };
        let (n00, n10, n01, n11) = (dot(0, 0), dot(1, 0), dot(0, 1), dot(1, 1));
        let (ty, tx) = (fade(fy), fade(fx));
        SQRT_2 * lerp(lerp(n00, n10, ty), lerp(n01, n11, ty), tx)
    })
}

fn rotate90(a: &Array2<f64>, quarter_turns: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    match quarter_turns % 4 {
        0 => a.clone(),
        1 => Array2::from_shape_fn((w, h), |(i, j)| a[[j, w - 1 - i]]),
        2 => Array2::from_shape_fn((h, w), |(i, j)| a[[h - 1 - i, w - 1 - j]]),
        _ => Array2::from_shape_fn((w, h), |(i, j)| a[[h - 1 - j, i]]),
    }
}

/// Seeded Perlin noise field with a random lattice resolution and a random
/// multiple-of-90° rotation (only 0° or 180° for non-square fields).
pub fn perlin_noise(params: &PerlinParams) -> Result<Array2<f64>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (lo, hi) = (params.scale_range.0.trailing_zeros(), params.scale_range.1.trailing_zeros());
    let res_y = 1usize << rng.random_range(lo..=hi);
    let res_x = 1usize << rng.random_range(lo..=hi);
    let noise = perlin_field(params.height, params.width, res_y, res_x, &mut rng);
    let turns = if params.height == params.width {
        rng.random_range(0..4)
    } else {
        2 * rng.random_range(0..2)
    };
    Ok(rotate90(&noise, turns))
}

/// Min-max normalizes `noise` and marks cells strictly above `threshold`.
pub fn threshold_noise(noise: &Array2<f64>, threshold: f64) -> AnomalyMask {
    let min = noise.fold(f64::INFINITY, |m, &v| m.min(v));
    let max = noise.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = max - min;
    let values = if span > 0.0 {
        noise.mapv(|v| if (v - min) / span > threshold { 1.0 } else { 0.0 })
    } else {
        Array2::zeros(noise.dim())
    };
    AnomalyMask { values }
}

/// Binary blob mask from thresholded Perlin noise.
pub fn perlin_mask(params: &PerlinParams) -> Result<AnomalyMask> {
    Ok(threshold_noise(&perlin_noise(params)?, params.threshold))
}

const MASK_RETRIES: u64 = 8;

/// [`perlin_mask`] that never returns an empty mask: retries with derived
/// seeds, then falls back to a single random `patch × patch` block.
pub fn nonempty_perlin_mask(params: &PerlinParams, patch: usize) -> Result<AnomalyMask> {
    let mut p = params.clone();
    for attempt in 0..=MASK_RETRIES {
        p.seed = params.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mask = perlin_mask(&p)?;
        if !mask.is_empty() {
            return Ok(mask);
        }
    }
    let (h, w) = (params.height, params.width);
    let patch = patch.clamp(1, h.min(w));
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xB10C);
    let (y, x) = (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch));
    let mut mask = AnomalyMask::zeros(h, w);
    mask.values
        .slice_mut(ndarray::s![y..y + patch, x..x + patch])
        .fill(1.0);
    Ok(mask)
}

/// Image augmentation operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOpKind {
    Posterize,
    Sharpness,
    Solarize,
    Equalize,
    Brightness,
    Color,
    Contrast,
}

impl fmt::Display for AugOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AugOpKind::Posterize => "posterize",
            AugOpKind::Sharpness => "sharpness",
            AugOpKind::Solarize => "solarize",
            AugOpKind::Equalize => "equalize",
            AugOpKind::Brightness => "brightness",
            AugOpKind::Color => "color",
            AugOpKind::Contrast => "contrast",
        };
        f.write_str(name)
    }
}

/// A concrete augmentation with its parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    /// Keep this many high bits of the 8-bit value.
    Posterize(u8),
    /// Blend factor against a smoothed copy; 1 is neutral.
    Sharpness(f64),
    /// Values at or above the threshold are inverted.
    Solarize(f64),
    Equalize,
    Brightness(f64),
    /// Blend factor against grayscale; 1 is neutral.
    Color(f64),
    /// Blend factor against the mean gray level; 1 is neutral.
    Contrast(f64),
}

impl AugOp {
    pub fn kind(&self) -> AugOpKind {
        match self {
            AugOp::Posterize(_) => AugOpKind::Posterize,
            AugOp::Sharpness(_) => AugOpKind::Sharpness,
            AugOp::Solarize(_) => AugOpKind::Solarize,
            AugOp::Equalize => AugOpKind::Equalize,
            AugOp::Brightness(_) => AugOpKind::Brightness,
            AugOp::Color(_) => AugOpKind::Color,
            AugOp::Contrast(_) => AugOpKind::Contrast,
        }
    }

    pub fn apply(&self, image: &ImageTensor) -> ImageTensor {
        let px = image.pixels();
        let out = match *self {
            AugOp::Posterize(bits) => {
                let bits = bits.clamp(1, 8);
                let keep: u8 = 0xFFu8 << (8 - bits);
                px.mapv(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8 & keep) as f64 / 255.0)
            }
            AugOp::Sharpness(factor) => blend(&smooth(px), px, factor),
            AugOp::Solarize(t) => px.mapv(|v| if v >= t { 1.0 - v } else { v }),
            AugOp::Equalize => equalize(px),
            AugOp::Brightness(factor) => px.mapv(|v| (v * factor).clamp(0.0, 1.0)),
            AugOp::Color(factor) => {
                let gray = grayscale(px);
                let degenerate = Array3::from_shape_fn(px.dim(), |(y, x, _)| gray[[y, x]]);
                blend(&degenerate, px, factor)
            }
            AugOp::Contrast(factor) => {
                let mean = grayscale(px).mean().unwrap_or(0.0);
                blend(&Array3::from_elem(px.dim(), mean), px, factor)
            }
        };
        ImageTensor::new(out).expect("augmentation preserves shape")
    }
}

fn grayscale(px: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = px.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * px[[y, x, 0]] + 0.587 * px[[y, x, 1]] + 0.114 * px[[y, x, 2]]
    })
}

/// `(1 − factor) · degenerate + factor · image`, clamped to `[0, 1]`.
fn blend(degenerate: &Array3<f64>, image: &Array3<f64>, factor: f64) -> Array3<f64> {
    let mut out = image.clone();
    Zip::from(&mut out)
        .and(degenerate)
        .for_each(|o, &d| *o = ((1.0 - factor) * d + factor * *o).clamp(0.0, 1.0));
    out
}

/// 3×3 smoothing kernel (center weight 5, total 13); border pixels unchanged.
fn smooth(px: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = px.dim();
    let mut out = px.clone();
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..c {
                let mut acc = 4.0 * px[[y, x, ch]];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += px[[y + dy - 1, x + dx - 1, ch]];
                    }
                }
                out[[y, x, ch]] = acc / 13.0;
            }
        }
    }
    out
}

/// Per-channel histogram equalization over 256 bins.
fn equalize(px: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = px.dim();
    let mut out = px.clone();
    for ch in 0..c {
        let levels: Vec<usize> = (0..h * w)
            .map(|i| (px[[i / w, i % w, ch]].clamp(0.0, 1.0) * 255.0).round() as usize)
            .collect();
        let mut hist = [0usize; 256];
        for &l in &levels {
            hist[l] += 1;
        }
        let last = hist.iter().rposition(|&n| n > 0).map_or(0, |i| hist[i]);
        let step = (levels.len() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0usize; 256];
        let mut n = step / 2;
        for (i, &count) in hist.iter().enumerate() {
            lut[i] = (n / step).min(255);
            n += count;
        }
        for (i, &l) in levels.iter().enumerate() {
            out[[i / w, i % w, ch]] = lut[l] as f64 / 255.0;
        }
    }
    out
}

/// Which op set a policy draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Anomaly-source images: all seven ops.
    Source,
    /// Normal images: brightness and contrast only.
    Normal,
}

impl PolicyKind {
    pub fn permitted(self) -> &'static [AugOpKind] {
        use AugOpKind::*;
        match self {
            PolicyKind::Source => &[Posterize, Sharpness, Solarize, Equalize, Brightness, Color, Contrast],
            PolicyKind::Normal => &[Brightness, Contrast],
        }
    }

    fn label(self) -> &'static str {
        match self {
            PolicyKind::Source => "source",
            PolicyKind::Normal => "normal",
        }
    }
}

/// Parameter ranges `(low, high)` for each op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugRanges {
    pub posterize_bits: (u8, u8),
    pub sharpness: (f64, f64),
    pub solarize: (f64, f64),
    pub brightness: (f64, f64),
    pub color: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for AugRanges {
    fn default() -> Self {
        Self {
            posterize_bits: (2, 6),
            sharpness: (0.1, 1.9),
            solarize: (0.3, 0.9),
            brightness: (0.6, 1.4),
            color: (0.0, 2.0),
            contrast: (0.5, 1.5),
        }
    }
}

impl AugRanges {
    /// Mild photometric jitter for normal images.
    pub fn mild() -> Self {
        Self {
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
            ..Self::default()
        }
    }

    fn sample(&self, kind: AugOpKind, rng: &mut impl Rng) -> AugOp {
        let uni = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        match kind {
            AugOpKind::Posterize => {
                let (lo, hi) = self.posterize_bits;
                AugOp::Posterize(rng.random_range(lo.min(hi)..=hi.max(lo)))
            }
            AugOpKind::Sharpness => AugOp::Sharpness(uni(rng, self.sharpness)),
            AugOpKind::Solarize => AugOp::Solarize(uni(rng, self.solarize)),
            AugOpKind::Equalize => AugOp::Equalize,
            AugOpKind::Brightness => AugOp::Brightness(uni(rng, self.brightness)),
            AugOpKind::Color => AugOp::Color(uni(rng, self.color)),
            AugOpKind::Contrast => AugOp::Contrast(uni(rng, self.contrast)),
        }
    }
}

/// A seeded augmentation recipe: `n_ops` distinct ops drawn from `ops`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    pub ops: Vec<AugOpKind>,
    pub n_ops: usize,
    pub ranges: AugRanges,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub fn source(seed: u64) -> Self {
        Self {
            kind: PolicyKind::Source,
            ops: PolicyKind::Source.permitted().to_vec(),
            n_ops: 3,
            ranges: AugRanges::default(),
            seed,
        }
    }

    pub fn normal(seed: u64) -> Self {
        Self {
            kind: PolicyKind::Normal,
            ops: PolicyKind::Normal.permitted().to_vec(),
            n_ops: 3,
            ranges: AugRanges::mild(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let permitted = self.kind.permitted();
        if let Some(op) = self.ops.iter().find(|op| !permitted.contains(op)) {
            return Err(Error::OpNotPermitted {
                op: op.to_string(),
                policy: self.kind.label(),
            });
        }
        Ok(())
    }

    /// The concrete ops this policy's seed selects, in application order.
    pub fn sample_ops(&self) -> Result<Vec<AugOp>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.n_ops.min(self.ops.len());
        let picked = sample(&mut rng, self.ops.len(), n).into_vec();
        Ok(picked
            .into_iter()
            .map(|i| self.ranges.sample(self.ops[i], &mut rng))
            .collect())
    }
}

/// Applies the policy's seeded op sequence.
pub fn augment(image: &ImageTensor, policy: &AugmentationPolicy) -> Result<ImageTensor> {
    let ops = policy.sample_ops()?;
    Ok(ops.iter().fold(image.clone(), |img, op| op.apply(&img)))
}

/// `(1 − M) ⊙ f_normal + M ⊙ f_source`, realized as a per-cell select.
pub fn synthesize_features(f_normal: &FeatureMap, f_source: &FeatureMap, mask: &AnomalyMask) -> Result<FeatureMap> {
    SYNTHESIS_CALLS.fetch_add(1, Ordering::Relaxed);
    f_normal.ensure_same_dim(f_source, "synthesize_features")?;
    let (h, w, _) = f_normal.dim();
    if mask.dim() != (h, w) {
        return Err(Error::shape("synthesize_features", format!("mask {h}x{w}"), format!("{:?}", mask.dim())));
    }
    let mut out = f_normal.data().clone();
    for ((y, x), &m) in mask.values().indexed_iter() {
        if m == 1.0 {
            out.slice_mut(ndarray::s![y, x, ..])
                .assign(&f_source.data().slice(ndarray::s![y, x, ..]));
        }
    }
    FeatureMap::new(out)
}

/// Token labels: 1 iff any cell of the token's `patch × patch` block is 1.
/// Tokens are ordered row-major over the patch grid.
pub fn token_ground_truth(mask: &AnomalyMask, patch: usize) -> Result<Array1<f64>> {
    let pooled = mask.max_pool(patch)?;
    Ok(pooled.values.iter().copied().collect())
}
