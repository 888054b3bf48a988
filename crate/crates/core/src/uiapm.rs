//! Uncertainty-integrated anomaly perception.
//!
//! Fused features are cut into `K × K` patches and linearly embedded into a
//! token sequence. A two-branch linear head predicts, per token, a Gaussian
//! over the anomaly score: mean `u` and standard deviation `σ = softplus(·)`.
//! Training draws one reparameterized sample per token; at test time `M`
//! samples give a mean map `U` and an uncertainty map `V`. Both are
//! binarized at `mean + γ·std` and intersected into the keep-mask that gates
//! keys and values in restoration attention.

use std::collections::BTreeSet;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{join, Binder, BoundLinear, Linear, Module};

/// KL weight in the auxiliary loss.
pub const DEFAULT_LAMBDA: f64 = 0.001;
/// Binarization threshold scale.
pub const DEFAULT_GAMMA: f64 = 1.0;
/// Test-time score samples per token.
pub const DEFAULT_SAMPLES: usize = 16;

/// `L × D` token matrix, row-major over the patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        let (l, d) = tokens.dim();
        if l == 0 || d == 0 {
            return Err(Error::InvalidParameter(format!("token sequence must be non-empty, got {l}x{d}")));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("token sequence contains non-finite values".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.tokens
    }
}

/// Cuts a feature map into non-overlapping `patch × patch` blocks.
///
/// Row `t = (y / patch) · (W / patch) + x / patch` holds the block values in
/// `(ky, kx, c)` order, matching a stride-`patch` convolution kernel.
pub fn patchify(f: &FeatureMap, patch: usize) -> Result<Array2<f64>> {
    let (h, w, c) = f.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::NotDivisible {
            what: "feature map",
            dims: format!("{h}x{w}"),
            patch,
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let data = f.data();
    let mut out = Array2::zeros((gh * gw, patch * patch * c));
    for ty in 0..gh {
        for tx in 0..gw {
            let mut row = out.row_mut(ty * gw + tx);
            for ky in 0..patch {
                for kx in 0..patch {
                    let base = (ky * patch + kx) * c;
                    row.slice_mut(s![base..base + c])
                        .assign(&data.slice(s![ty * patch + ky, tx * patch + kx, ..]));
                }
            }
        }
    }
    Ok(out)
}

/// Stride-`K` convolutional patch embedding (a linear map on patch vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbedding {
    pub fn new(rng: &mut ChaCha8Rng, patch: usize, channels: usize, dim: usize) -> Self {
        Self {
            patch,
            proj: Linear::new(rng, patch * patch * channels, dim, true),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundLinear {
        self.proj.bind(b, &join(prefix, "proj"))
    }
}

impl Module for PatchEmbedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

pub fn embed_tokens(f: &FeatureMap, patch: usize, embedding: &PatchEmbedding) -> Result<TokenSequence> {
    if embedding.patch != patch {
        return Err(Error::shape("embed_tokens", format!("patch {}", embedding.patch), format!("patch {patch}")));
    }
    let patches = patchify(f, patch)?;
    if patches.ncols() != embedding.proj.weight.nrows() {
        return Err(Error::shape("embed_tokens", embedding.proj.weight.nrows(), patches.ncols()));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let proj = embedding.bind(&mut b, "");
    let x = g.constant(patches);
    let e = proj.forward(&mut g, x);
    TokenSequence::new(g.value(e).clone())
}

/// Two linear maps `D → 1`: score mean and pre-softplus standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionHead {
    pub mean: Linear,
    pub scale: Linear,
}

impl PerceptionHead {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self {
            mean: Linear::new(rng, dim, 1, true),
            scale: Linear::new(rng, dim, 1, true),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mean: Linear::zeros(dim, 1, true),
            scale: Linear::zeros(dim, 1, true),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundPerceptionHead {
        BoundPerceptionHead {
            mean: self.mean.bind(b, &join(prefix, "mean")),
            scale: self.scale.bind(b, &join(prefix, "scale")),
        }
    }
}

impl Module for PerceptionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.mean.visit(&join(prefix, "mean"), f);
        self.scale.visit(&join(prefix, "scale"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.mean.visit_mut(&join(prefix, "mean"), f);
        self.scale.visit_mut(&join(prefix, "scale"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPerceptionHead {
    pub mean: BoundLinear,
    pub scale: BoundLinear,
}

impl BoundPerceptionHead {
    /// Returns `(u, σ)`, each `rows × 1`.
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> (Var, Var) {
        let u = self.mean.forward(g, tokens);
        let raw = self.scale.forward(g, tokens);
        let sigma = g.softplus(raw);
        (u, sigma)
    }
}

/// Per-token Gaussian over the anomaly score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistribution {
    pub u: Array1<f64>,
    pub sigma: Array1<f64>,
    /// Optional `M × L` drawn score sequences.
    pub samples: Option<Array2<f64>>,
}

impl ScoreDistribution {
    pub fn new(u: Array1<f64>, sigma: Array1<f64>) -> Result<Self> {
        if u.len() != sigma.len() {
            return Err(Error::shape("ScoreDistribution", u.len(), sigma.len()));
        }
        if u.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("score distribution must be finite".into()));
        }
        if sigma.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParameter("sigma must be non-negative".into()));
        }
        Ok(Self { u, sigma, samples: None })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

pub fn predict_distribution(tokens: &TokenSequence, head: &PerceptionHead) -> Result<ScoreDistribution> {
    if tokens.dim() != head.mean.weight.nrows() {
        return Err(Error::shape("predict_distribution", head.mean.weight.nrows(), tokens.dim()));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let bound = head.bind(&mut b, "");
    let x = g.constant(tokens.tokens().clone());
    let (u, sigma) = bound.forward(&mut g, x);
    let col = |v: Var| g.value(v).column(0).to_owned();
    ScoreDistribution::new(col(u), col(sigma))
}

/// Reparameterized draw `z = u + ε ⊙ σ`.
pub fn sample_scores(dist: &ScoreDistribution, eps: &Array1<f64>) -> Result<Array1<f64>> {
    if eps.len() != dist.len() {
        return Err(Error::shape("sample_scores", dist.len(), eps.len()));
    }
    Ok(&dist.u + &(eps * &dist.sigma))
}

fn check_labels(labels: &Array1<f64>) -> Result<()> {
    match labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&bad) => Err(Error::InvalidParameter(format!("labels must be 0 or 1, found {bad}"))),
        None => Ok(()),
    }
}

fn column(a: &Array1<f64>) -> Array2<f64> {
    a.clone().insert_axis(Axis(1))
}

/// Logit-form binary cross-entropy on both branches:
/// `BCE(z_sa, g_sa) + BCE(z_n, g_n)`, each averaged over tokens.
pub fn discriminative_loss(
    z_sa: &Array1<f64>,
    g_sa: &Array1<f64>,
    z_n: &Array1<f64>,
    g_n: &Array1<f64>,
) -> Result<f64> {
    for (z, gt) in [(z_sa, g_sa), (z_n, g_n)] {
        if z.len() != gt.len() {
            return Err(Error::shape("discriminative_loss", z.len(), gt.len()));
        }
        check_labels(gt)?;
    }
    let mut g = Graph::new();
    let a = g.constant(column(z_sa));
    let b = g.constant(column(z_n));
    let la = g.bce_with_logits(a, Rc::new(column(g_sa)));
    let lb = g.bce_with_logits(b, Rc::new(column(g_n)));
    let total = g.add(la, lb);
    Ok(g.scalar(total))
}

/// Token-averaged `KL(N(u, σ²) ‖ N(0, 1))`.
pub fn kl_loss(dist: &ScoreDistribution) -> Result<f64> {
    if let Some(&bad) = dist.sigma.iter().find(|&&s| s <= 0.0) {
        return Err(Error::InvalidParameter(format!("kl_loss requires sigma > 0, found {bad}")));
    }
    let mut g = Graph::new();
    let u = g.constant(column(&dist.u));
    let s = g.constant(column(&dist.sigma));
    let kl = g.gaussian_kl(u, s);
    Ok(g.scalar(kl))
}

pub fn auxiliary_loss(l_dis: f64, l_kl: f64, lambda: f64) -> f64 {
    l_dis + lambda * l_kl
}

/// `M × L` reparameterized draws from a seeded standard-normal stream.
pub fn draw_scores(dist: &ScoreDistribution, m: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = dist.len();
    let mut out = Array2::zeros((m, l));
    for mut row in out.rows_mut() {
        for t in 0..l {
            let eps: f64 = StandardNormal.sample(&mut rng);
            row[t] = dist.u[t] + eps * dist.sigma[t];
        }
    }
    out
}

/// Mean and population standard deviation of a sequence. The mean is taken
/// relative to the first element so that constant input is reproduced exactly.
pub fn mean_and_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let mut it = values.clone();
    let Some(first) = it.next() else { return (0.0, 0.0) };
    let (mut n, mut shifted) = (1usize, 0.0);
    for v in it {
        shifted += v - first;
        n += 1;
    }
    let mean = first + shifted / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Per-token mean `U` and population standard deviation `V` over `M × L` samples.
pub fn mean_and_uncertainty(samples: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let l = samples.ncols();
    let mut u = Array1::zeros(l);
    let mut v = Array1::zeros(l);
    for (t, col) in samples.columns().into_iter().enumerate() {
        let (m, s) = mean_and_std(col.iter().copied());
        u[t] = m;
        v[t] = s;
    }
    (u, v)
}

/// Draws `m ≥ 2` score sequences and returns `(U, V)`.
pub fn estimate_mean_uncertainty(dist: &ScoreDistribution, m: usize, seed: u64) -> Result<(Array1<f64>, Array1<f64>)> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 samples, got {m}")));
    }
    Ok(mean_and_uncertainty(&draw_scores(dist, m, seed)))
}

/// Binary keep-mask over tokens; `true` keeps the token as normal context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask(Vec<bool>);

impl TokenMask {
    pub fn new(keep: Vec<bool>) -> Self {
        Self(keep)
    }

    pub fn all_kept(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn all_masked(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        values
            .iter()
            .map(|&v| match v {
                1.0 => Ok(true),
                0.0 => Ok(false),
                other => Err(Error::NonBinaryMask(other)),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    pub fn keep(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices of masked-out tokens.
    pub fn masked_out(&self) -> BTreeSet<usize> {
        self.0.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.masked_out().len() as f64 / self.0.len() as f64
    }
}

/// Which side of the threshold is kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeepDirection {
    /// Keep `x ≤ mean + γ·std`.
    KeepLow,
    /// Keep `x ≥ mean − γ·std`.
    KeepHigh,
}

pub fn binarize(seq: &Array1<f64>, gamma: f64, direction: KeepDirection) -> TokenMask {
    let (mean, std) = mean_and_std(seq.iter().copied());
    let keep = match direction {
        KeepDirection::KeepLow => {
            let t = mean + gamma * std;
            seq.iter().map(|&x| x <= t).collect()
        }
        KeepDirection::KeepHigh => {
            let t = mean - gamma * std;
            seq.iter().map(|&x| x >= t).collect()
        }
    };
    TokenMask(keep)
}

/// Elementwise AND of keep-masks: a token is masked out if either mask drops it.
pub fn fuse_masks(m_u: &TokenMask, m_v: &TokenMask) -> Result<TokenMask> {
    if m_u.len() != m_v.len() {
        return Err(Error::shape("fuse_masks", m_u.len(), m_v.len()));
    }
    Ok(TokenMask(m_u.0.iter().zip(&m_v.0).map(|(&a, &b)| a && b).collect()))
}

/// Mean and uncertainty maps with their binarized and fused masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskFusionResult {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub m_u: TokenMask,
    pub m_v: TokenMask,
    pub m_final: TokenMask,
}

impl MaskFusionResult {
    /// Binarizes both maps (high values masked out) and intersects the keep-masks.
    pub fn from_moments(u: Array1<f64>, v: Array1<f64>, gamma: f64) -> Self {
        let m_u = binarize(&u, gamma, KeepDirection::KeepLow);
        let m_v = binarize(&v, gamma, KeepDirection::KeepLow);
        let m_final = fuse_masks(&m_u, &m_v).expect("U and V have equal length");
        Self { u, v, m_u, m_v, m_final }
    }
}

/// Test-time perception: `m` draws, moments, binarization, fusion.
pub fn perceive(dist: &ScoreDistribution, m: usize, gamma: f64, seed: u64) -> Result<MaskFusionResult> {
    let (u, v) = estimate_mean_uncertainty(dist, m, seed)?;
    Ok(MaskFusionResult::from_moments(u, v, gamma))
}
