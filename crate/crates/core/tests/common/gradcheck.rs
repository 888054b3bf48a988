//! Central finite differences against the tape gradients.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use uranet::autodiff::Graph;
use uranet::backbone::FeatureMap;
use uranet::model::{ModelConfig, TrainBatch, UraNet};
use uranet::nn::{Binder, Module};
use uranet::ram::BatchShape;
use uranet::uiapm::{patchify, PatchEmbedding};
use uranet::ram::Reconstructor;

use super::{rand_map, rng};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst relative error of one parameter tensor:
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub name: String,
    pub rel: f64,
    pub norm: f64,
}

pub fn relative_error(a: &Array2<f64>, n: &Array2<f64>) -> (f64, f64) {
    let diff = (a - n).mapv(|v| v * v).sum().sqrt();
    let na = a.mapv(|v| v * v).sum().sqrt();
    let nn = n.mapv(|v| v * v).sum().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        (diff, scale)
    } else {
        (diff / scale, scale)
    }
}

/// Replaces every parameter with a random draw. Initial values would leave
/// some groups with exactly zero gradient (zero output projections), which
/// would make the comparison vacuous.
pub fn randomize<M: Module>(m: &mut M, seed: u64) {
    let mut r = rng(seed);
    m.visit_mut("", &mut |name, p| {
        let centre = if name.ends_with("gamma") {
            1.0
        } else if name.ends_with("attn.beta") {
            0.7
        } else {
            0.0
        };
        p.mapv_inplace(|_| centre + r.random_range(-0.6..0.6));
    });
}

/// Central differences of `f` over every element of every named parameter.
pub fn numeric_gradients<M, F>(m: &M, f: F) -> BTreeMap<String, Array2<f64>>
where
    M: Module + Clone,
    F: Fn(&M) -> f64,
{
    let names: Vec<(String, (usize, usize))> = m.named_parameters().into_iter().map(|(k, v)| (k, v.dim())).collect();
    let mut out = BTreeMap::new();
    for (name, dim) in names {
        let mut grad = Array2::zeros(dim);
        for idx in ndarray::indices(dim) {
            let eval = |delta: f64| {
                let mut probe = m.clone();
                probe.visit_mut("", &mut |n, p| {
                    if n == name {
                        p[idx] += delta;
                    }
                });
                f(&probe)
            };
            grad[idx] = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        }
        out.insert(name, grad);
    }
    out
}

pub fn compare(
    analytic: &BTreeMap<String, Array2<f64>>,
    numeric: &BTreeMap<String, Array2<f64>>,
) -> Vec<GroupError> {
    numeric
        .iter()
        .map(|(name, n)| {
            let (rel, norm) = match analytic.get(name) {
                Some(a) => relative_error(a, n),
                // Absent means the tape saw no dependence; the numeric side must agree.
                None => relative_error(&Array2::zeros(n.dim()), n),
            };
            GroupError {
                name: name.clone(),
                rel,
                norm,
            }
        })
        .collect()
}

pub fn grad_model(use_uiapm: bool, restoration: bool, first_residual: bool, positional: bool) -> ModelConfig {
    let mut cfg = ModelConfig {
        channels: 2,
        feature_size: (4, 4),
        use_uiapm,
        positional_embedding: positional,
        ..super::tiny_model()
    };
    cfg.reconstructor.restoration_attention = restoration;
    cfg.reconstructor.first_residual = first_residual;
    cfg
}

fn batch_for(cfg: &ModelConfig, seed: u64) -> (TrainBatch, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let (h, w) = cfg.feature_size;
    let b = 2;
    let l = cfg.tokens();
    let batch = TrainBatch {
        f_n: (0..b).map(|_| rand_map(&mut r, h, w, cfg.channels)).collect(),
        f_sa: (0..b).map(|_| rand_map(&mut r, h, w, cfg.channels)).collect(),
        g_sa: (0..b)
            .map(|_| Array1::from_shape_fn(l, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 }))
            .collect(),
    };
    let mut eps = || (0..b * l).map(|_| StandardNormal.sample(&mut r)).collect::<Vec<f64>>();
    let (e1, e2) = (eps(), eps());
    (batch, e1, e2)
}

/// Gradient check of the full training objective for one model configuration.
pub fn check_objective(cfg: &ModelConfig, seed: u64) -> Vec<GroupError> {
    let mut net = UraNet::new(cfg, seed).unwrap();
    randomize(&mut net, seed ^ 0xA5A5);
    let (batch, eps_sa, eps_n) = batch_for(cfg, seed.wrapping_add(17));
    let analytic = net.gradients(&batch, &eps_sa, &eps_n).unwrap().grads;
    let numeric = numeric_gradients(&net, |m: &UraNet| {
        let lg = m.loss_graph(&batch, &eps_sa, &eps_n).unwrap();
        lg.graph.scalar(lg.loss)
    });
    compare(&analytic, &numeric)
}

/// The objective-level configurations covered: full model, first residual
/// kept, softmax first stage, no perception head, learned positions.
pub fn objective_cases() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("full", grad_model(true, true, false, false)),
        ("first residual", grad_model(true, true, true, false)),
        ("softmax encoder", grad_model(true, false, true, false)),
        ("no perception", grad_model(false, false, true, false)),
        ("positional", grad_model(true, true, false, true)),
    ]
}

/// Embedding plus reconstructor, bundled so finite differences can walk both.
#[derive(Clone, Debug)]
pub struct RecNet {
    pub embed: PatchEmbedding,
    pub rec: Reconstructor,
}

impl Module for RecNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.embed.visit(&format!("{prefix}embed"), f);
        self.rec.visit(&format!("{prefix}rec"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.embed.visit_mut(&format!("{prefix}embed"), f);
        self.rec.visit_mut(&format!("{prefix}rec"), f);
    }
}

/// `Σ w ⊙ F̂` as a graph, returning its value and named gradients.
fn weighted_reconstruction(
    net: &RecNet,
    f_in: &FeatureMap,
    keep: &[f64],
    weights: &Array2<f64>,
    grid: (usize, usize),
) -> (f64, BTreeMap<String, Array2<f64>>) {
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, true);
    let emb = net.embed.bind(&mut b, "embed");
    let rec = net.rec.bind(&mut b, "rec");
    let bindings = b.finish();
    let x = g.constant(patchify(f_in, net.embed.patch).unwrap());
    let tokens = emb.forward(&mut g, x);
    let shape = BatchShape { batch: 1, seq: keep.len() };
    let rows = rec.forward(&mut g, tokens, &Rc::new(keep.to_vec()), shape, grid);
    let w = g.constant(weights.clone());
    let prod = g.mul(rows, w);
    let s = g.sum(prod);
    let value = g.scalar(s);
    let mut grads = g.backward(s);
    (value, bindings.gradients(&mut grads))
}

/// Gradient check of a scalar function of the reconstruction with respect
/// to every embedding and reconstructor weight, under a partial keep-mask.
pub fn check_reconstructor(seed: u64) -> Vec<GroupError> {
    let cfg = grad_model(true, true, false, false);
    let mut r = rng(seed);
    let mut net = RecNet {
        embed: PatchEmbedding::new(&mut r, cfg.uiapm.patch, cfg.channels, cfg.reconstructor.dim),
        rec: Reconstructor::new(&mut r, &cfg.reconstructor, cfg.uiapm.patch, cfg.channels).unwrap(),
    };
    randomize(&mut net, seed ^ 0x5A5A);
    let (h, w) = cfg.feature_size;
    let f_in = rand_map(&mut r, h, w, cfg.channels);
    let keep = [1.0, 0.0, 1.0, 1.0];
    let weights = super::uniform2(&mut r, (h * w, cfg.channels), 1.0);
    let grid = cfg.grid();
    let (_, analytic) = weighted_reconstruction(&net, &f_in, &keep, &weights, grid);
    let numeric = numeric_gradients(&net, |m: &RecNet| weighted_reconstruction(m, &f_in, &keep, &weights, grid).0);
    compare(&analytic, &numeric)
}

pub fn worst(errors: &[GroupError]) -> &GroupError {
    errors
        .iter()
        .max_by(|a, b| a.rel.total_cmp(&b.rel))
        .expect("at least one parameter group")
}
