//! Restoration transformer.
//!
//! Restoration blocks attend with `β · ReLU(Q Kᵀ)` over keys and values whose
//! masked-out rows are zeroed, so anomalous tokens can only be rebuilt from
//! normal context. The first residual is dropped by default: a masked token's
//! own features never leak straight through. Refine blocks are ordinary
//! pre-norm softmax blocks. The final projection maps each token back to its
//! `K × K` patch of the feature map.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{join, Binder, BoundLayerNorm, BoundLinear, BoundMlp, LayerNorm, Linear, Mlp, Module};
use crate::uiapm::{patchify, PatchEmbedding, TokenMask, TokenSequence};

/// Logit offset used to exclude masked keys from a softmax.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructorConfig {
    pub n_restoration_blocks: usize,
    pub n_refine_blocks: usize,
    pub heads: usize,
    pub dim: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Masked ReLU attention in the first stage; `false` swaps in vanilla blocks.
    #[serde(skip)]
    pub restoration_attention: bool,
    /// Keep the residual around restoration attention.
    #[serde(skip)]
    pub first_residual: bool,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        Self {
            n_restoration_blocks: 2,
            n_refine_blocks: 2,
            heads: 12,
            dim: 768,
            mlp_ratio: 4,
            restoration_attention: true,
            first_residual: false,
        }
    }
}

impl ReconstructorConfig {
    pub fn toy() -> Self {
        Self {
            n_restoration_blocks: 1,
            n_refine_blocks: 1,
            heads: 4,
            dim: 64,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.mlp_ratio == 0 || self.n_restoration_blocks == 0 {
            return Err(Error::Config("reconstructor sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }
}

/// Bias-free query/key/value/output projections plus the ReLU-attention scale.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    /// `1 × 1`, shared by all heads.
    pub beta: Array2<f64>,
    pub heads: usize,
}

impl AttentionWeights {
    /// `W_K` starts as a copy of `W_Q`, so every head's initial score matrix
    /// `X W_Q W_Qᵀ Xᵀ` is positive semidefinite and each token scores itself
    /// non-negatively; with independent draws the ReLU scores of tokens sharing
    /// a large common component can all start (or drift) negative, and then no
    /// gradient reaches the projections again. `W_O` starts at zero so the
    /// block's attention branch enters training silent.
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        let wq = Linear::new(rng, dim, dim, false);
        Self {
            wk: wq.clone(),
            wq,
            wv: Linear::new(rng, dim, dim, false),
            wo: Linear::zeros(dim, dim, false),
            beta: Array2::from_elem((1, 1), 1.0 / ((dim / heads) as f64).sqrt()),
            heads,
        }
    }

    /// Independent random draws for all four projections (oracles and tests).
    pub fn random(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        Self {
            wq: Linear::new(rng, dim, dim, false),
            wk: Linear::new(rng, dim, dim, false),
            wv: Linear::new(rng, dim, dim, false),
            wo: Linear::new(rng, dim, dim, false),
            ..Self::new(rng, dim, heads)
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.weight.nrows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.weight.dim() != (d, d) {
                return Err(Error::shape("AttentionWeights", format!("{d}x{d}"), format!("{:?}", w.weight.dim())));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidParameter(format!("dim {d} not divisible by {} heads", self.heads)));
        }
        if !self.beta[[0, 0]].is_finite() {
            return Err(Error::InvalidParameter("beta must be finite".into()));
        }
        Ok(())
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundAttention {
        BoundAttention {
            wq: self.wq.bind(b, &join(prefix, "wq")),
            wk: self.wk.bind(b, &join(prefix, "wk")),
            wv: self.wv.bind(b, &join(prefix, "wv")),
            wo: self.wo.bind(b, &join(prefix, "wo")),
            beta: b.bind(prefix, "beta", &self.beta),
            heads: self.heads,
        }
    }
}

impl Module for AttentionWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wo.visit_mut(&join(prefix, "wo"), f);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Layout of a stacked token batch: `batch` sequences of `seq` rows each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub seq: usize,
}

impl BatchShape {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

enum Scoring {
    Relu(Var),
    Softmax,
}

/// Per-sample, per-head attention over already-projected `q`, `k`, `v`.
fn multi_head(
    g: &mut Graph,
    (q, k, v): (Var, Var, Var),
    shape: BatchShape,
    heads: usize,
    scoring: &Scoring,
    key_bias: Option<&[Var]>,
) -> Var {
    let dim = g.shape(q).1;
    let dh = dim / heads;
    let temperature = 1.0 / (dh as f64).sqrt();
    let mut samples = Vec::with_capacity(shape.batch);
    for b in 0..shape.batch {
        let rows = |g: &mut Graph, x| g.slice_rows(x, b * shape.seq, shape.seq);
        let (qb, kb, vb) = (rows(g, q), rows(g, k), rows(g, v));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(qb, h * dh, dh);
            let kh = g.slice_cols(kb, h * dh, dh);
            let vh = g.slice_cols(vb, h * dh, dh);
            let logits = g.matmul_t(qh, kh);
            let weights = match scoring {
                Scoring::Relu(beta) => {
                    let a = g.relu(logits);
                    g.scale_by(a, *beta)
                }
                Scoring::Softmax => {
                    let mut a = g.scale(logits, temperature);
                    if let Some(bias) = key_bias {
                        a = g.add_row(a, bias[b]);
                    }
                    g.softmax_rows(a)
                }
            };
            outs.push(g.matmul(weights, vh));
        }
        samples.push(if heads == 1 { outs[0] } else { g.concat_cols(&outs) });
    }
    if samples.len() == 1 {
        samples[0]
    } else {
        g.concat_rows(&samples)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub beta: Var,
    pub heads: usize,
}

impl BoundAttention {
    /// Masked ReLU attention; `keep` has one 0/1 entry per stacked row.
    pub fn restoration(&self, g: &mut Graph, x: Var, keep: &Rc<Vec<f64>>, shape: BatchShape) -> Var {
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let k = g.scale_rows(k, keep.clone());
        let v = g.scale_rows(v, keep.clone());
        let z = multi_head(g, (q, k, v), shape, self.heads, &Scoring::Relu(self.beta), None);
        self.wo.forward(g, z)
    }

    /// Softmax attention over unmasked keys. When a sample masks every key the
    /// offsets cancel and it attends uniformly.
    pub fn softmax(&self, g: &mut Graph, x: Var, keep: Option<&Rc<Vec<f64>>>, shape: BatchShape) -> Var {
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let bias: Option<Vec<Var>> = keep.map(|keep| {
            (0..shape.batch)
                .map(|b| {
                    let row = Array2::from_shape_fn((1, shape.seq), |(_, t)| {
                        if keep[b * shape.seq + t] == 0.0 {
                            MASKED_LOGIT
                        } else {
                            0.0
                        }
                    });
                    g.constant(row)
                })
                .collect()
        });
        let z = multi_head(g, (q, k, v), shape, self.heads, &Scoring::Softmax, bias.as_deref());
        self.wo.forward(g, z)
    }
}

/// Restoration block: `E = Z + MLP(LN(Z))`, or with the first residual kept,
/// `H = E_prev + Z; E = H + MLP(LN(H))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationBlock {
    pub attn: AttentionWeights,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub first_residual: bool,
}

impl RestorationBlock {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: usize, first_residual: bool) -> Self {
        Self {
            attn: AttentionWeights::new(rng, dim, heads),
            norm: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio),
            first_residual,
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundRestorationBlock {
        BoundRestorationBlock {
            attn: self.attn.bind(b, &join(prefix, "attn")),
            norm: self.norm.bind(b, &join(prefix, "norm")),
            mlp: self.mlp.bind(b, &join(prefix, "mlp")),
            first_residual: self.first_residual,
        }
    }
}

impl Module for RestorationBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundRestorationBlock {
    pub attn: BoundAttention,
    pub norm: BoundLayerNorm,
    pub mlp: BoundMlp,
    pub first_residual: bool,
}

impl BoundRestorationBlock {
    pub fn forward(&self, g: &mut Graph, x: Var, keep: &Rc<Vec<f64>>, shape: BatchShape) -> Var {
        let z = self.attn.restoration(g, x, keep, shape);
        let h = if self.first_residual { g.add(x, z) } else { z };
        let n = self.norm.forward(g, h);
        let m = self.mlp.forward(g, n);
        g.add(h, m)
    }
}

/// Pre-norm softmax transformer block with both residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionWeights,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl VanillaBlock {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: AttentionWeights::new(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio),
        }
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundVanillaBlock {
        // Softmax attention has a fixed temperature, so beta is not a parameter here.
        let attn = &self.attn;
        let p = join(prefix, "attn");
        BoundVanillaBlock {
            norm1: self.norm1.bind(b, &join(prefix, "norm1")),
            attn: BoundAttention {
                wq: attn.wq.bind(b, &join(&p, "wq")),
                wk: attn.wk.bind(b, &join(&p, "wk")),
                wv: attn.wv.bind(b, &join(&p, "wv")),
                wo: attn.wo.bind(b, &join(&p, "wo")),
                beta: b.graph().constant(attn.beta.clone()),
                heads: attn.heads,
            },
            norm2: self.norm2.bind(b, &join(prefix, "norm2")),
            mlp: self.mlp.bind(b, &join(prefix, "mlp")),
        }
    }
}

impl Module for VanillaBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        let p = join(prefix, "attn");
        self.attn.wq.visit(&join(&p, "wq"), f);
        self.attn.wk.visit(&join(&p, "wk"), f);
        self.attn.wv.visit(&join(&p, "wv"), f);
        self.attn.wo.visit(&join(&p, "wo"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        let p = join(prefix, "attn");
        self.attn.wq.visit_mut(&join(&p, "wq"), f);
        self.attn.wk.visit_mut(&join(&p, "wk"), f);
        self.attn.wv.visit_mut(&join(&p, "wv"), f);
        self.attn.wo.visit_mut(&join(&p, "wo"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundVanillaBlock {
    pub norm1: BoundLayerNorm,
    pub attn: BoundAttention,
    pub norm2: BoundLayerNorm,
    pub mlp: BoundMlp,
}

impl BoundVanillaBlock {
    pub fn forward(&self, g: &mut Graph, x: Var, keep: Option<&Rc<Vec<f64>>>, shape: BatchShape) -> Var {
        let n = self.norm1.forward(g, x);
        let a = self.attn.softmax(g, n, keep, shape);
        let h = g.add(x, a);
        let n = self.norm2.forward(g, h);
        let m = self.mlp.forward(g, n);
        g.add(h, m)
    }
}

/// First-stage block: masked restoration or, for ablations, masked softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderBlock {
    Restoration(RestorationBlock),
    Vanilla(VanillaBlock),
}

impl EncoderBlock {
    fn bind(&self, b: &mut Binder, prefix: &str) -> BoundEncoderBlock {
        match self {
            EncoderBlock::Restoration(r) => BoundEncoderBlock::Restoration(r.bind(b, prefix)),
            EncoderBlock::Vanilla(v) => BoundEncoderBlock::Vanilla(v.bind(b, prefix)),
        }
    }
}

impl Module for EncoderBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        match self {
            EncoderBlock::Restoration(r) => r.visit(prefix, f),
            EncoderBlock::Vanilla(v) => v.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        match self {
            EncoderBlock::Restoration(r) => r.visit_mut(prefix, f),
            EncoderBlock::Vanilla(v) => v.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BoundEncoderBlock {
    Restoration(BoundRestorationBlock),
    Vanilla(BoundVanillaBlock),
}

/// Token-to-map projection: linear `D → K·K·C`, then depth-to-space.
#[derive(Clone, Debug, PartialEq)]
pub struct Unembedding {
    pub patch: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl Unembedding {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, patch: usize, channels: usize) -> Self {
        Self {
            patch,
            channels,
            proj: Linear::new(rng, dim, patch * patch * channels, true),
        }
    }
}

impl Module for Unembedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Row gather taking `(B·L·K·K) × C` patch rows to `(B·H·W) × C` spatial rows
/// in `(b, y, x)` order.
pub fn depth_to_space_order(batch: usize, grid: (usize, usize), patch: usize) -> Vec<usize> {
    let (gh, gw) = grid;
    let (h, w) = (gh * patch, gw * patch);
    let seq = gh * gw;
    let mut perm = Vec::with_capacity(batch * h * w);
    for b in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let token = (y / patch) * gw + x / patch;
                perm.push((b * seq + token) * patch * patch + (y % patch) * patch + x % patch);
            }
        }
    }
    perm
}

#[derive(Clone, Copy, Debug)]
pub struct BoundUnembedding {
    pub proj: BoundLinear,
    pub patch: usize,
    pub channels: usize,
}

impl BoundUnembedding {
    /// Returns spatial rows `(B·H·W) × C`.
    pub fn forward(&self, g: &mut Graph, tokens: Var, batch: usize, grid: (usize, usize)) -> Var {
        let rows = g.shape(tokens).0;
        let p = self.proj.forward(g, tokens);
        let flat = g.reshape(p, (rows * self.patch * self.patch, self.channels));
        g.permute_rows(flat, Rc::new(depth_to_space_order(batch, grid, self.patch)))
    }
}

/// Restoration stage, refine stage and unembedding. The patch embedding is
/// owned by the caller because the perception head reads the same tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstructor {
    pub config: ReconstructorConfig,
    pub encoder: Vec<EncoderBlock>,
    pub refine: Vec<VanillaBlock>,
    pub unembed: Unembedding,
}

impl Reconstructor {
    pub fn new(rng: &mut ChaCha8Rng, config: &ReconstructorConfig, patch: usize, channels: usize) -> Result<Self> {
        config.validate()?;
        let (d, h, r) = (config.dim, config.heads, config.mlp_ratio);
        let encoder = (0..config.n_restoration_blocks)
            .map(|_| {
                if config.restoration_attention {
                    EncoderBlock::Restoration(RestorationBlock::new(rng, d, h, r, config.first_residual))
                } else {
                    EncoderBlock::Vanilla(VanillaBlock::new(rng, d, h, r))
                }
            })
            .collect();
        let refine = (0..config.n_refine_blocks).map(|_| VanillaBlock::new(rng, d, h, r)).collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            refine,
            unembed: Unembedding::new(rng, d, patch, channels),
        })
    }

    pub fn bind(&self, b: &mut Binder, prefix: &str) -> BoundReconstructor {
        BoundReconstructor {
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &join(prefix, &format!("encoder.{i}"))))
                .collect(),
            refine: self
                .refine
                .iter()
                .enumerate()
                .map(|(i, blk)| blk.bind(b, &join(prefix, &format!("refine.{i}"))))
                .collect(),
            unembed: BoundUnembedding {
                proj: self.unembed.proj.bind(b, &join(prefix, "unembed.proj")),
                patch: self.unembed.patch,
                channels: self.unembed.channels,
            },
        }
    }
}

impl Module for Reconstructor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        for (i, blk) in self.encoder.iter().enumerate() {
            blk.visit(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, blk) in self.refine.iter().enumerate() {
            blk.visit(&join(prefix, &format!("refine.{i}")), f);
        }
        self.unembed.visit(&join(prefix, "unembed"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        for (i, blk) in self.encoder.iter_mut().enumerate() {
            blk.visit_mut(&join(prefix, &format!("encoder.{i}")), f);
        }
        for (i, blk) in self.refine.iter_mut().enumerate() {
            blk.visit_mut(&join(prefix, &format!("refine.{i}")), f);
        }
        self.unembed.visit_mut(&join(prefix, "unembed"), f);
    }
}

pub struct BoundReconstructor {
    encoder: Vec<BoundEncoderBlock>,
    refine: Vec<BoundVanillaBlock>,
    pub unembed: BoundUnembedding,
}

impl BoundReconstructor {
    /// Token-to-token part: all first-stage blocks share `keep`.
    pub fn restore(&self, g: &mut Graph, tokens: Var, keep: &Rc<Vec<f64>>, shape: BatchShape) -> Var {
        let mut x = tokens;
        for blk in &self.encoder {
            x = match blk {
                BoundEncoderBlock::Restoration(r) => r.forward(g, x, keep, shape),
                BoundEncoderBlock::Vanilla(v) => v.forward(g, x, Some(keep), shape),
            };
        }
        for blk in &self.refine {
            x = blk.forward(g, x, None, shape);
        }
        x
    }

    /// Tokens to spatial rows `(B·H·W) × C`.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: Var,
        keep: &Rc<Vec<f64>>,
        shape: BatchShape,
        grid: (usize, usize),
    ) -> Var {
        let x = self.restore(g, tokens, keep, shape);
        self.unembed.forward(g, x, shape.batch, grid)
    }
}

fn check_tokens(seq: &TokenSequence, dim: usize, mask_len: usize, op: &'static str) -> Result<()> {
    if seq.dim() != dim {
        return Err(Error::shape(op, format!("token dim {dim}"), format!("token dim {}", seq.dim())));
    }
    if seq.len() != mask_len {
        return Err(Error::shape(op, format!("{} mask entries", seq.len()), mask_len));
    }
    Ok(())
}

fn single(seq: &TokenSequence) -> BatchShape {
    BatchShape { batch: 1, seq: seq.len() }
}

/// `Z = (β · ReLU(Q K_mᵀ)) V_m`, per head, concatenated and output-projected.
pub fn restoration_attention(e_prev: &TokenSequence, m_final: &[f64], w: &AttentionWeights) -> Result<TokenSequence> {
    w.validate()?;
    let keep = Rc::new(TokenMask::from_f64(m_final)?.to_f64());
    check_tokens(e_prev, w.dim(), keep.len(), "restoration_attention")?;
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let attn = w.bind(&mut b, "");
    let x = g.constant(e_prev.tokens().clone());
    let z = attn.restoration(&mut g, x, &keep, single(e_prev));
    TokenSequence::new(g.value(z).clone())
}

pub fn restoration_block(e_prev: &TokenSequence, m_final: &[f64], block: &RestorationBlock) -> Result<TokenSequence> {
    block.attn.validate()?;
    let keep = Rc::new(TokenMask::from_f64(m_final)?.to_f64());
    check_tokens(e_prev, block.attn.dim(), keep.len(), "restoration_block")?;
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let bound = block.bind(&mut b, "");
    let x = g.constant(e_prev.tokens().clone());
    let e = bound.forward(&mut g, x, &keep, single(e_prev));
    TokenSequence::new(g.value(e).clone())
}

/// Applies refine blocks in order.
pub fn refine_decoder(tokens: &TokenSequence, blocks: &[VanillaBlock]) -> Result<TokenSequence> {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let bound: Vec<_> = blocks.iter().map(|blk| blk.bind(&mut b, "")).collect();
    let mut x = g.constant(tokens.tokens().clone());
    for (blk, w) in bound.iter().zip(blocks) {
        w.attn.validate()?;
        if w.attn.dim() != tokens.dim() {
            return Err(Error::shape("refine_decoder", w.attn.dim(), tokens.dim()));
        }
        x = blk.forward(&mut g, x, None, single(tokens));
    }
    TokenSequence::new(g.value(x).clone())
}

/// Maps `L` tokens onto a `grid.0·K × grid.1·K × C` feature map.
pub fn unembed(tokens: &TokenSequence, grid: (usize, usize), u: &Unembedding) -> Result<FeatureMap> {
    if tokens.len() != grid.0 * grid.1 {
        return Err(Error::shape("unembed", format!("{} tokens", grid.0 * grid.1), tokens.len()));
    }
    if tokens.dim() != u.proj.weight.nrows() {
        return Err(Error::shape("unembed", u.proj.weight.nrows(), tokens.dim()));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let proj = u.proj.bind(&mut b, "");
    let bound = BoundUnembedding {
        proj,
        patch: u.patch,
        channels: u.channels,
    };
    let x = g.constant(tokens.tokens().clone());
    let rows = bound.forward(&mut g, x, 1, grid);
    FeatureMap::from_rows(g.value(rows).clone(), grid.0 * u.patch, grid.1 * u.patch)
}

/// Embed, restore with a shared keep-mask, refine, unembed.
pub fn reconstruct(
    f_in: &FeatureMap,
    m_final: &[f64],
    embedding: &PatchEmbedding,
    reconstructor: &Reconstructor,
) -> Result<FeatureMap> {
    let (h, w, c) = f_in.dim();
    let patch = embedding.patch;
    if reconstructor.unembed.patch != patch || reconstructor.unembed.channels != c {
        return Err(Error::shape(
            "reconstruct",
            format!("patch {patch}, {c} channels"),
            format!("patch {}, {} channels", reconstructor.unembed.patch, reconstructor.unembed.channels),
        ));
    }
    let patches = patchify(f_in, patch)?;
    if patches.ncols() != embedding.proj.weight.nrows() {
        return Err(Error::shape("reconstruct", embedding.proj.weight.nrows(), patches.ncols()));
    }
    let keep = Rc::new(TokenMask::from_f64(m_final)?.to_f64());
    if keep.len() != patches.nrows() {
        return Err(Error::shape("reconstruct", format!("{} mask entries", patches.nrows()), keep.len()));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let emb = embedding.bind(&mut b, "embed");
    let rec = reconstructor.bind(&mut b, "rec");
    let x = g.constant(patches);
    let tokens = emb.forward(&mut g, x);
    let shape = BatchShape { batch: 1, seq: keep.len() };
    let rows = rec.forward(&mut g, tokens, &keep, shape, (h / patch, w / patch));
    FeatureMap::from_rows(g.value(rows).clone(), h, w)
}
