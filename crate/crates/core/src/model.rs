//! The full network: shared patch embedding, perception head and reconstructor.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{join, Binder, Bindings, Module};
use crate::objectives::{anomaly_map, reconstruction_terms, AnomalyMap, LossBreakdown};
use crate::ram::{reconstruct, BatchShape, Reconstructor, ReconstructorConfig};
use crate::uiapm::{
    embed_tokens, patchify, perceive, predict_distribution, MaskFusionResult, PatchEmbedding, PerceptionHead,
    TokenMask, DEFAULT_GAMMA, DEFAULT_LAMBDA, DEFAULT_SAMPLES,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UiapmConfig {
    /// Patch side `K`.
    pub patch: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Test-time draws `M`.
    pub samples: usize,
}

impl Default for UiapmConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Fused backbone channels `C_F`.
    pub channels: usize,
    /// Feature map size `(H_F, W_F)`.
    pub feature_size: (usize, usize),
    pub uiapm: UiapmConfig,
    pub reconstructor: ReconstructorConfig,
    /// `false` drops the perception head: every token is kept and there is no auxiliary loss.
    #[serde(skip)]
    pub use_uiapm: bool,
    /// Learned positional embedding added to the tokens.
    pub positional_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 1792,
            feature_size: (64, 64),
            uiapm: UiapmConfig::default(),
            reconstructor: ReconstructorConfig::default(),
            use_uiapm: true,
            positional_embedding: false,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            channels: 56,
            feature_size: (16, 16),
            reconstructor: ReconstructorConfig::toy(),
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.feature_size.0 / self.uiapm.patch, self.feature_size.1 / self.uiapm.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn validate(&self) -> Result<()> {
        self.reconstructor.validate()?;
        let k = self.uiapm.patch;
        let (h, w) = self.feature_size;
        if k == 0 || h == 0 || w == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::NotDivisible {
                what: "feature size",
                dims: format!("{h}x{w}"),
                patch: k,
            });
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.uiapm.samples < 2 || !(self.uiapm.lambda >= 0.0) || !self.uiapm.gamma.is_finite() {
            return Err(Error::Config(format!("invalid perception settings {:?}", self.uiapm)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UraNet {
    pub config: ModelConfig,
    pub embed: PatchEmbedding,
    /// `L × D`, present when positional embeddings are enabled.
    pub pos: Option<Array2<f64>>,
    pub head: PerceptionHead,
    pub rec: Reconstructor,
}

impl UraNet {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.reconstructor.dim;
        let k = config.uiapm.patch;
        Ok(Self {
            config: config.clone(),
            embed: PatchEmbedding::new(&mut rng, k, config.channels, d),
            pos: config.positional_embedding.then(|| Array2::zeros((config.tokens(), d))),
            head: PerceptionHead::new(&mut rng, d),
            rec: Reconstructor::new(&mut rng, &config.reconstructor, k, config.channels)?,
        })
    }

    fn check_map(&self, f: &FeatureMap) -> Result<()> {
        let (h, w, c) = f.dim();
        let (eh, ew) = self.config.feature_size;
        if (h, w, c) != (eh, ew, self.config.channels) {
            return Err(Error::shape("UraNet", format!("{eh}x{ew}x{}", self.config.channels), format!("{h}x{w}x{c}")));
        }
        Ok(())
    }

    /// Builds the training objective for one batch. `eps_sa` and `eps_n` hold
    /// one standard-normal draw per stacked token.
    pub fn loss_graph(&self, batch: &TrainBatch, eps_sa: &[f64], eps_n: &[f64]) -> Result<LossGraph> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyInput("training batch"));
        }
        let l = self.config.tokens();
        for f in batch.f_n.iter().chain(&batch.f_sa) {
            self.check_map(f)?;
        }
        if batch.f_sa.len() != b || batch.g_sa.len() != b || batch.g_sa.iter().any(|g| g.len() != l) {
            return Err(Error::shape("loss_graph", format!("{b} samples of {l} tokens"), "ragged batch"));
        }
        if eps_sa.len() != b * l || eps_n.len() != b * l {
            return Err(Error::shape("loss_graph", b * l, eps_sa.len().min(eps_n.len())));
        }
        let k = self.config.uiapm.patch;
        let stack_patches = |maps: &[FeatureMap]| -> Result<Array2<f64>> {
            let parts = maps.iter().map(|f| patchify(f, k)).collect::<Result<Vec<_>>>()?;
            Ok(concatenate(Axis(0), &parts.iter().map(|p| p.view()).collect::<Vec<_>>()).expect("equal widths"))
        };
        let stack_rows = |maps: &[FeatureMap]| {
            let parts: Vec<_> = maps.iter().map(|f| f.to_rows()).collect();
            concatenate(Axis(0), &parts.iter().map(|p| p.view()).collect::<Vec<_>>()).expect("equal widths")
        };

        let mut g = Graph::new();
        let mut binder = Binder::new(&mut g, true);
        let embed = self.embed.bind(&mut binder, "embed");
        let pos = self.pos.as_ref().map(|p| binder.bind("", "pos", p));
        let use_uiapm = self.config.use_uiapm;
        let head = use_uiapm.then(|| self.head.bind(&mut binder, "head"));
        let rec = self.rec.bind(&mut binder, "rec");
        let bindings = binder.finish();

        let shape = BatchShape { batch: b, seq: l };
        let tokens = |g: &mut Graph, patches: Array2<f64>| {
            let x = g.constant(patches);
            let e = embed.forward(g, x);
            match pos {
                Some(p) => {
                    let tiled = if b == 1 { p } else { g.concat_rows(&vec![p; b]) };
                    g.add(e, tiled)
                }
                None => e,
            }
        };
        let e_sa = tokens(&mut g, stack_patches(&batch.f_sa)?);

        let mut breakdown = LossBreakdown::default();
        let (keep, aux) = match head {
            Some(head) => {
                let e_n = tokens(&mut g, stack_patches(&batch.f_n)?);
                let (u_sa, s_sa) = head.forward(&mut g, e_sa);
                let (u_n, s_n) = head.forward(&mut g, e_n);
                let draw = |g: &mut Graph, u: Var, s: Var, eps: &[f64]| {
                    let e = g.constant(Array2::from_shape_vec((eps.len(), 1), eps.to_vec()).expect("column"));
                    let noise = g.mul(e, s);
                    g.add(u, noise)
                };
                let z_sa = draw(&mut g, u_sa, s_sa, eps_sa);
                let z_n = draw(&mut g, u_n, s_n, eps_n);
                let labels = batch.g_sa.iter().flat_map(|t| t.iter().copied()).collect::<Vec<_>>();
                if let Some(bad) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidParameter(format!("token labels must be 0 or 1, found {bad}")));
                }
                let labels = Array2::from_shape_vec((b * l, 1), labels).expect("column");
                let dis_sa = g.bce_with_logits(z_sa, Rc::new(labels));
                let dis_n = g.bce_with_logits(z_n, Rc::new(Array2::zeros((b * l, 1))));
                let l_dis = g.add(dis_sa, dis_n);
                let u_all = g.concat_rows(&[u_sa, u_n]);
                let s_all = g.concat_rows(&[s_sa, s_n]);
                let l_kl = g.gaussian_kl(u_all, s_all);
                let weighted = g.scale(l_kl, self.config.uiapm.lambda);
                let l_aux = g.add(l_dis, weighted);
                breakdown.l_dis = g.scalar(l_dis);
                breakdown.l_kl = g.scalar(l_kl);
                breakdown.l_aux = g.scalar(l_aux);

                // The mask is a constant: analytic moments, no gradient through binarization.
                let (u, s) = (g.value(u_sa).column(0).to_owned(), g.value(s_sa).column(0).to_owned());
                let mut keep = Vec::with_capacity(b * l);
                for i in 0..b {
                    let r = i * l..(i + 1) * l;
                    let fused = MaskFusionResult::from_moments(
                        u.slice(ndarray::s![r.clone()]).to_owned(),
                        s.slice(ndarray::s![r]).to_owned(),
                        self.config.uiapm.gamma,
                    );
                    keep.extend(fused.m_final.to_f64());
                }
                (keep, Some(l_aux))
            }
            None => (vec![1.0; b * l], None),
        };

        let keep = Rc::new(keep);
        let f_hat = rec.forward(&mut g, e_sa, &keep, shape, self.config.grid());
        let target = g.constant(stack_rows(&batch.f_n));
        let terms = reconstruction_terms(&mut g, target, f_hat, b);
        let loss = match aux {
            Some(a) => g.add(terms.total, a),
            None => terms.total,
        };
        breakdown.l_local_mse = g.scalar(terms.local_mse);
        breakdown.l_local_cos = g.scalar(terms.local_cos);
        breakdown.l_global = g.scalar(terms.global);
        breakdown.l_rec = g.scalar(terms.total);
        breakdown.l_final = g.scalar(loss);
        let masked_fraction = keep.iter().filter(|&&k| k == 0.0).count() as f64 / keep.len() as f64;
        Ok(LossGraph {
            graph: g,
            bindings,
            loss,
            breakdown,
            masked_fraction,
        })
    }

    /// Loss terms and named gradients for one batch.
    pub fn gradients(&self, batch: &TrainBatch, eps_sa: &[f64], eps_n: &[f64]) -> Result<StepOutput> {
        let lg = self.loss_graph(batch, eps_sa, eps_n)?;
        let mut grads = lg.graph.backward(lg.loss);
        Ok(StepOutput {
            breakdown: lg.breakdown,
            grads: lg.bindings.gradients(&mut grads),
            masked_fraction: lg.masked_fraction,
        })
    }

    /// Test-time keep-mask from `M` seeded draws; all-kept without the head.
    pub fn perceive(&self, f: &FeatureMap, seed: u64) -> Result<Option<MaskFusionResult>> {
        self.check_map(f)?;
        if !self.config.use_uiapm {
            return Ok(None);
        }
        let tokens = self.tokens(f)?;
        let dist = predict_distribution(&tokens, &self.head)?;
        Ok(Some(perceive(&dist, self.config.uiapm.samples, self.config.uiapm.gamma, seed)?))
    }

    fn tokens(&self, f: &FeatureMap) -> Result<crate::uiapm::TokenSequence> {
        let t = embed_tokens(f, self.config.uiapm.patch, &self.embed)?;
        match &self.pos {
            Some(p) => crate::uiapm::TokenSequence::new(t.into_inner() + p),
            None => Ok(t),
        }
    }

    /// Restored features for a given keep-mask.
    pub fn reconstruct(&self, f: &FeatureMap, keep: &TokenMask) -> Result<FeatureMap> {
        self.check_map(f)?;
        match &self.pos {
            None => reconstruct(f, &keep.to_f64(), &self.embed, &self.rec),
            Some(_) => {
                let tokens = self.tokens(f)?;
                let mut g = Graph::new();
                let mut b = Binder::new(&mut g, false);
                let rec = self.rec.bind(&mut b, "rec");
                let x = g.constant(tokens.into_inner());
                let shape = BatchShape { batch: 1, seq: keep.len() };
                let rows = rec.forward(&mut g, x, &Rc::new(keep.to_f64()), shape, self.config.grid());
                let (h, w) = self.config.feature_size;
                FeatureMap::from_rows(g.value(rows).clone(), h, w)
            }
        }
    }

    /// Full inference path for one feature map.
    pub fn infer(&self, f: &FeatureMap, out_hw: (usize, usize), seed: u64) -> Result<Inference> {
        let fusion = self.perceive(f, seed)?;
        let keep = fusion
            .as_ref()
            .map(|r| r.m_final.clone())
            .unwrap_or_else(|| TokenMask::all_kept(self.config.tokens()));
        let f_hat = self.reconstruct(f, &keep)?;
        let map = anomaly_map(f, &f_hat, out_hw)?;
        Ok(Inference { f_hat, fusion, map })
    }
}

impl Module for UraNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        if let Some(p) = &self.pos {
            f(&join(prefix, "pos"), p);
        }
        self.head.visit(&join(prefix, "head"), f);
        self.rec.visit(&join(prefix, "rec"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        if let Some(p) = &mut self.pos {
            f(&join(prefix, "pos"), p);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
        self.rec.visit_mut(&join(prefix, "rec"), f);
    }
}

/// Normal targets, synthesized inputs and token labels for one step.
#[derive(Clone, Debug, Default)]
pub struct TrainBatch {
    pub f_n: Vec<FeatureMap>,
    pub f_sa: Vec<FeatureMap>,
    pub g_sa: Vec<Array1<f64>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.f_n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_n.is_empty()
    }
}

pub struct LossGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub masked_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Array2<f64>>,
    /// Share of synthesized-input tokens dropped by the training mask.
    pub masked_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub f_hat: FeatureMap,
    pub fusion: Option<MaskFusionResult>,
    pub map: AnomalyMap,
}
