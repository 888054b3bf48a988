//! Independent oracles, one function per worked example. Each returns a short
//! detail line and panics on mismatch.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::{array, s, Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use uranet::autodiff::Graph;
use uranet::backbone::{fuse_levels, Backbone, BackboneRegistry, BackboneSpec, FeatureExtractor, FeatureMap, ImageTensor, ToyBackbone};
use uranet::checkpoint::Checkpoint;
use uranet::config::{Layout, Variant};
use uranet::dataset::load_dataset;
use uranet::eval::{infer, read_matrix, read_scores};
use uranet::fasm::{perlin_mask, synthesize_features, AnomalyMask, AugOp, PerlinParams};
use uranet::metrics::{acc_f1, auroc, optimal_f1_threshold, Granularity, ScoredSet};
use uranet::model::{TrainBatch, UraNet};
use uranet::nn::{Binder, Linear, Mlp, LAYER_NORM_EPS};
use uranet::objectives::{anomaly_map, image_score, local_mse_loss};
use uranet::ram::{
    refine_decoder, restoration_attention, restoration_block, unembed, AttentionWeights, BatchShape, RestorationBlock,
    Unembedding, VanillaBlock,
};
use uranet::train::Trainer;
use uranet::uiapm::{
    binarize, discriminative_loss, embed_tokens, estimate_mean_uncertainty, fuse_masks, kl_loss, mean_and_uncertainty,
    predict_distribution, sample_scores, KeepDirection, PatchEmbedding, PerceptionHead, ScoreDistribution, TokenMask,
    TokenSequence,
};

use super::gradcheck::{self, randomize};
use super::props::{brute_auroc, loop_confusion};
use super::{rand_map, rng, uniform1, uniform2};

/// Mean anomalous-area fraction of default Perlin masks over seeds 0..1000,
/// recorded from the first verified run (0.49958).
pub const PERLIN_AREA_FIXTURE: f64 = 0.499_582_031_25;
pub const PERLIN_AREA_BAND: (f64, f64) = (0.48, 0.52);

fn close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

fn close_arrays<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>, tol: f64, what: &str) -> f64 {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let worst = a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst <= tol, "{what}: max abs diff {worst} > {tol}");
    worst
}

// ---- scalar references ----

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn linear_ref(x: &Array2<f64>, l: &Linear) -> Array2<f64> {
    let (n, din) = x.dim();
    let dout = l.weight.ncols();
    Array2::from_shape_fn((n, dout), |(i, o)| {
        let mut acc = l.bias.as_ref().map_or(0.0, |b| b[[0, o]]);
        for k in 0..din {
            acc += x[[i, k]] * l.weight[[k, o]];
        }
        acc
    })
}

fn layer_norm_ref(x: &Array2<f64>, gamma: &Array2<f64>, beta: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let mean = (0..d).map(|j| x[[i, j]]).sum::<f64>() / d as f64;
        let var = (0..d).map(|j| (x[[i, j]] - mean).powi(2)).sum::<f64>() / d as f64;
        for j in 0..d {
            out[[i, j]] = (x[[i, j]] - mean) / (var + LAYER_NORM_EPS).sqrt() * gamma[[0, j]] + beta[[0, j]];
        }
    }
    out
}

fn mlp_ref(x: &Array2<f64>, mlp: &Mlp) -> Array2<f64> {
    linear_ref(&linear_ref(x, &mlp.fc1).mapv(gelu), &mlp.fc2)
}

/// Softmax multi-head attention by explicit loops.
fn softmax_attention_ref(x: &Array2<f64>, w: &AttentionWeights) -> Array2<f64> {
    let (q, k, v) = (linear_ref(x, &w.wq), linear_ref(x, &w.wk), linear_ref(x, &w.wv));
    let (l, d) = q.dim();
    let dh = d / w.heads;
    let mut z = Array2::zeros((l, d));
    for h in 0..w.heads {
        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| q[[i, h * dh + c]] * k[[j, h * dh + c]]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..dh {
                z[[i, h * dh + c]] = (0..l).map(|j| e[j] / total * v[[j, h * dh + c]]).sum();
            }
        }
    }
    linear_ref(&z, &w.wo)
}

fn ramp_image(h: usize, w: usize) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        ((y * w + x) as f64 / (h * w) as f64 + 0.05 * c as f64).min(1.0)
    }))
    .unwrap()
}

// ---- backbone ----

pub fn toy_backbone_levels() -> String {
    let mut registry = BackboneRegistry::default();
    registry.register("toy-8-16-32", |spec: &BackboneSpec| {
        Ok(Arc::new(ToyBackbone::new(spec.seed, &[8, 16, 32])) as Arc<dyn Backbone>)
    });
    let spec = BackboneSpec {
        name: "toy-8-16-32".into(),
        ..BackboneSpec::toy(5)
    };
    let ex = FeatureExtractor::with_registry(&spec, &registry).unwrap();
    let maps = ex.extract_multilevel(&ramp_image(64, 64));
    let dims: Vec<_> = maps.iter().map(FeatureMap::dim).collect();
    assert_eq!(dims, vec![(32, 32, 8), (16, 16, 16), (8, 8, 32)]);
    format!("{dims:?}")
}

pub fn bilinear_fuse() -> String {
    let level = FeatureMap::new(array![[[1.0], [3.0]], [[5.0], [11.0]]]).unwrap();
    let fused = fuse_levels(&[level], (4, 4)).unwrap();
    // Half-pixel source coordinates for 2 → 4, clamped to the grid.
    let pos = [0.0, 0.25, 0.75, 1.0];
    let corners = [[1.0, 3.0], [5.0, 11.0]];
    let expected = Array3::from_shape_fn((4, 4, 1), |(oy, ox, _)| {
        let (py, px) = (pos[oy], pos[ox]);
        let top = corners[0][0] * (1.0 - px) + corners[0][1] * px;
        let bottom = corners[1][0] * (1.0 - px) + corners[1][1] * px;
        top * (1.0 - py) + bottom * py
    });
    let worst = close_arrays(fused.data(), &expected, 1e-12, "bilinear");
    format!("max diff {worst:.1e}")
}

// ---- fasm ----

pub fn perlin_area_band() -> String {
    let mean = (0..1000u64)
        .map(|seed| {
            perlin_mask(&PerlinParams {
                seed,
                ..PerlinParams::default()
            })
            .unwrap()
            .area_fraction()
        })
        .sum::<f64>()
        / 1000.0;
    assert!(mean > 0.0 && mean < 1.0, "mean area {mean}");
    assert!(
        mean >= PERLIN_AREA_BAND.0 && mean <= PERLIN_AREA_BAND.1,
        "mean area {mean} left the recorded band {PERLIN_AREA_BAND:?} (fixture {PERLIN_AREA_FIXTURE})"
    );
    format!("mean area {mean:.5}")
}

pub fn posterize_levels() -> String {
    let out = AugOp::Posterize(2).apply(&ramp_image(32, 32));
    let mut worst = 0;
    for c in 0..3 {
        let distinct: BTreeSet<u64> = out.pixels().slice(s![.., .., c]).iter().map(|v| v.to_bits()).collect();
        assert!(distinct.len() <= 4, "channel {c} has {} levels", distinct.len());
        worst = worst.max(distinct.len());
    }
    format!("{worst} levels")
}

pub fn synthesis_select() -> String {
    let mut r = rng(11);
    let (h, w, c) = (6, 5, 3);
    let fn_ = rand_map(&mut r, h, w, c);
    let fs = rand_map(&mut r, h, w, c);
    let mask = AnomalyMask::new(Array2::from_shape_fn((h, w), |_| if r.random_bool(0.4) { 1.0 } else { 0.0 })).unwrap();
    let out = synthesize_features(&fn_, &fs, &mask).unwrap();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let m = mask.values()[[y, x]];
                let expected = (1.0 - m) * fn_.data()[[y, x, ch]] + m * fs.data()[[y, x, ch]];
                assert_eq!(out.data()[[y, x, ch]], expected, "cell ({y}, {x}, {ch})");
            }
        }
    }
    format!("{} cells from source", mask.count())
}

// ---- uiapm ----

pub fn embedding_average_pool() -> String {
    let (k, c) = (2, 3);
    let mut r = rng(12);
    let f = rand_map(&mut r, 4, 6, c);
    let mut emb = PatchEmbedding::new(&mut r, k, c, c);
    emb.proj.weight = Array2::from_shape_fn((k * k * c, c), |(row, col)| if row % c == col { 0.25 } else { 0.0 });
    emb.proj.bias = Some(Array2::zeros((1, c)));
    let tokens = embed_tokens(&f, k, &emb).unwrap();
    let (gh, gw) = (2, 3);
    let mut pooled = Array2::zeros((gh * gw, c));
    for ty in 0..gh {
        for tx in 0..gw {
            for ch in 0..c {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += f.data()[[ty * k + ky, tx * k + kx, ch]];
                    }
                }
                pooled[[ty * gw + tx, ch]] = acc / (k * k) as f64;
            }
        }
    }
    let worst = close_arrays(tokens.tokens(), &pooled, 1e-12, "patch means");
    format!("max diff {worst:.1e}")
}

pub fn head_affine() -> String {
    let mut r = rng(13);
    let (l, d) = (7, 5);
    let mut head = PerceptionHead::new(&mut r, d);
    head.mean.bias = Some(uniform2(&mut r, (1, 1), 1.0));
    head.scale.bias = Some(uniform2(&mut r, (1, 1), 1.0));
    let tokens = TokenSequence::new(uniform2(&mut r, (l, d), 2.0)).unwrap();
    let dist = predict_distribution(&tokens, &head).unwrap();
    for t in 0..l {
        let mut u = head.mean.bias.as_ref().unwrap()[[0, 0]];
        let mut raw = head.scale.bias.as_ref().unwrap()[[0, 0]];
        for j in 0..d {
            u += tokens.tokens()[[t, j]] * head.mean.weight[[j, 0]];
            raw += tokens.tokens()[[t, j]] * head.scale.weight[[j, 0]];
        }
        close(dist.u[t], u, 1e-12, "u");
        close(dist.sigma[t], softplus(raw), 1e-12, "sigma");
    }
    format!("{l} tokens")
}

pub fn sample_moments() -> String {
    let n = 1_000_000;
    let dist = ScoreDistribution::new(Array1::from_elem(n, 1.0), Array1::from_elem(n, 2.0)).unwrap();
    let mut r = rng(14);
    let eps = Array1::from_shape_fn(n, |_| StandardNormal.sample(&mut r));
    let z = sample_scores(&dist, &eps).unwrap();
    let mean = z.sum() / n as f64;
    let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    close(mean, 1.0, 0.01, "sample mean");
    close(std, 2.0, 0.01, "sample std");
    format!("mean {mean:.4}, std {std:.4}")
}

pub fn bce_loop() -> String {
    let mut r = rng(15);
    let l = 9;
    let z_sa = uniform1(&mut r, l, 4.0);
    let z_n = uniform1(&mut r, l, 4.0);
    let g_sa = Array1::from_shape_fn(l, |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let g_n = Array1::zeros(l);
    let bce = |z: &Array1<f64>, g: &Array1<f64>| {
        let mut total = 0.0;
        for i in 0..z.len() {
            let p = 1.0 / (1.0 + (-z[i]).exp());
            total += -(g[i] * p.ln() + (1.0 - g[i]) * (1.0 - p).ln());
        }
        total / z.len() as f64
    };
    let expected = bce(&z_sa, &g_sa) + bce(&z_n, &g_n);
    let got = discriminative_loss(&z_sa, &g_sa, &z_n, &g_n).unwrap();
    close(got, expected, 1e-12, "BCE");
    format!("{got:.6}")
}

/// Trapezoid rule for `∫ p log(p / q)` with `p = N(u, σ²)`, `q = N(0, 1)`.
fn kl_quadrature(u: f64, sigma: f64) -> f64 {
    let (lo, hi) = (u - 14.0 * sigma, u + 14.0 * sigma);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| {
        let log_p = -0.5 * ((x - u) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_q = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_p.exp() * (log_p - log_q)
    };
    let mut total = 0.5 * (f(lo) + f(hi));
    for i in 1..n {
        total += f(lo + i as f64 * h);
    }
    total * h
}

pub fn kl_quadrature_match() -> String {
    let mut r = rng(16);
    let mut worst = 0.0f64;
    for _ in 0..8 {
        let u = r.random_range(-2.0..2.0);
        let sigma = r.random_range(0.2..3.0);
        let got = kl_loss(&ScoreDistribution::new(array![u], array![sigma]).unwrap()).unwrap();
        let expected = kl_quadrature(u, sigma);
        close(got, expected, 1e-6, &format!("KL at ({u}, {sigma})"));
        worst = worst.max((got - expected).abs());
    }
    format!("max diff {worst:.1e}")
}

pub fn uncertainty_monte_carlo() -> String {
    let l = 4;
    let dist = ScoreDistribution::new(Array1::zeros(l), Array1::ones(l)).unwrap();
    let (u, v) = estimate_mean_uncertainty(&dist, 100_000, 17).unwrap();
    for t in 0..l {
        close(u[t], 0.0, 0.02, "U");
        close(v[t], 1.0, 0.02, "V");
    }
    format!("U[0] {:.4}, V[0] {:.4}", u[0], v[0])
}

pub fn two_sample_moments() -> String {
    let a = [0.5, -1.0, 3.0, 2.0];
    let b = [1.5, -1.0, -3.0, 2.5];
    let samples = Array2::from_shape_fn((2, 4), |(i, t)| if i == 0 { a[t] } else { b[t] });
    let (u, v) = mean_and_uncertainty(&samples);
    for t in 0..4 {
        close(u[t], (a[t] + b[t]) / 2.0, 1e-15, "two-sample mean");
        close(v[t], (a[t] - b[t]).abs() / 2.0, 1e-15, "two-sample std");
    }
    format!("V = {:?}", v.to_vec())
}

pub fn binarize_example() -> String {
    let seq = array![0.0, 0.0, 0.0, 1.0];
    let threshold = 0.25 + (0.1875f64).sqrt();
    close(threshold, 0.683, 5e-4, "threshold");
    let m = binarize(&seq, 1.0, KeepDirection::KeepLow);
    assert_eq!(m.keep(), &[true, true, true, false]);
    format!("threshold {threshold:.4}")
}

pub fn fusion_union() -> String {
    let mut r = rng(18);
    for _ in 0..200 {
        let n = r.random_range(1..40);
        let a = TokenMask::new((0..n).map(|_| r.random_bool(0.7)).collect());
        let b = TokenMask::new((0..n).map(|_| r.random_bool(0.7)).collect());
        let fused = fuse_masks(&a, &b).unwrap();
        let union: BTreeSet<usize> = a.masked_out().union(&b.masked_out()).copied().collect();
        assert_eq!(fused.masked_out(), union);
    }
    "200 random pairs".into()
}

// ---- ram ----

pub fn restoration_hand_example() -> String {
    let one = || Linear {
        weight: array![[1.0]],
        bias: None,
    };
    let w = AttentionWeights {
        wq: one(),
        wk: one(),
        wv: one(),
        wo: one(),
        beta: array![[1.0]],
        heads: 1,
    };
    let z = restoration_attention(&TokenSequence::new(array![[2.0]]).unwrap(), &[1.0], &w).unwrap();
    assert_eq!(z.tokens()[[0, 0]], 8.0);
    "Z = 8".into()
}

fn random_restoration_block(seed: u64, dim: usize, heads: usize) -> RestorationBlock {
    let mut r = rng(seed);
    let mut block = RestorationBlock::new(&mut r, dim, heads, 2, false);
    randomize(&mut block, seed + 1);
    block
}

pub fn restoration_block_mlp() -> String {
    let block = random_restoration_block(19, 6, 2);
    let mut r = rng(20);
    let x = TokenSequence::new(uniform2(&mut r, (5, 6), 1.0)).unwrap();
    let keep = [1.0, 0.0, 1.0, 1.0, 0.0];
    let z = restoration_attention(&x, &keep, &block.attn).unwrap();
    let e = restoration_block(&x, &keep, &block).unwrap();
    let expected = mlp_ref(&layer_norm_ref(z.tokens(), &block.norm.gamma, &block.norm.beta), &block.mlp);
    let worst = close_arrays(&(e.tokens() - z.tokens()), &expected, 1e-10, "E − Z");
    format!("max diff {worst:.1e}")
}

pub fn refine_block_loops() -> String {
    let mut r = rng(21);
    let (l, d, heads) = (5, 6, 3);
    let mut block = VanillaBlock::new(&mut r, d, heads, 2);
    randomize(&mut block, 22);
    let x = uniform2(&mut r, (l, d), 1.0);
    let got = refine_decoder(&TokenSequence::new(x.clone()).unwrap(), std::slice::from_ref(&block)).unwrap();
    let a = softmax_attention_ref(&layer_norm_ref(&x, &block.norm1.gamma, &block.norm1.beta), &block.attn);
    let h = &x + &a;
    let expected = &h + &mlp_ref(&layer_norm_ref(&h, &block.norm2.gamma, &block.norm2.beta), &block.mlp);
    let worst = close_arrays(got.tokens(), &expected, 1e-5, "refine block");
    format!("max diff {worst:.1e}")
}

pub fn unembed_gather() -> String {
    let mut r = rng(23);
    let (k, c, d, grid) = (2, 3, 4, (2, 3));
    let mut u = Unembedding::new(&mut r, d, k, c);
    u.proj.bias = Some(uniform2(&mut r, (1, k * k * c), 1.0));
    let tokens = uniform2(&mut r, (grid.0 * grid.1, d), 1.0);
    let out = unembed(&TokenSequence::new(tokens.clone()).unwrap(), grid, &u).unwrap();
    let p = linear_ref(&tokens, &u.proj);
    let expected = Array3::from_shape_fn((grid.0 * k, grid.1 * k, c), |(y, x, ch)| {
        let t = (y / k) * grid.1 + x / k;
        p[[t, ((y % k) * k + x % k) * c + ch]]
    });
    let worst = close_arrays(out.data(), &expected, 1e-12, "unembed");
    format!("max diff {worst:.1e}")
}

pub fn reconstructor_gradients() -> String {
    let errors = gradcheck::check_reconstructor(24);
    let w = gradcheck::worst(&errors);
    assert!(w.rel < gradcheck::TOLERANCE, "{}: relative error {:.2e}", w.name, w.rel);
    format!("{} groups, worst {} {:.1e}", errors.len(), w.name, w.rel)
}

pub fn relu_differs_from_softmax() -> String {
    let mut r = rng(25);
    let (l, d) = (4, 4);
    let w = AttentionWeights::random(&mut r, d, 2);
    let x = uniform2(&mut r, (l, d), 1.0);
    let relu = restoration_attention(&TokenSequence::new(x.clone()).unwrap(), &[1.0; 4], &w).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::new(&mut g, false);
    let bound = w.bind(&mut b, "");
    let xv = g.constant(x);
    let soft = bound.softmax(&mut g, xv, None, BatchShape { batch: 1, seq: l });
    let gap = (relu.tokens() - g.value(soft)).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(gap > 1e-3, "ReLU and softmax attention agree to {gap}");
    format!("max gap {gap:.3}")
}

// ---- objectives ----

pub fn local_mse_loops() -> String {
    let mut r = rng(26);
    let (h, w, c) = (3, 4, 5);
    let a = rand_map(&mut r, h, w, c);
    let b = rand_map(&mut r, h, w, c);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                total += (b.data()[[y, x, ch]] - a.data()[[y, x, ch]]).powi(2);
            }
        }
    }
    let expected = total / (h * w) as f64;
    let got = local_mse_loss(&a, &b).unwrap();
    close(got, expected, 1e-12, "local MSE");
    format!("{got:.6}")
}

pub fn loss_breakdown_sums() -> String {
    let cfg = gradcheck::grad_model(true, true, false, false);
    let mut r = rng(27);
    for seed in 0..5 {
        let mut net = UraNet::new(&cfg, seed).unwrap();
        randomize(&mut net, seed + 100);
        let (h, w) = cfg.feature_size;
        let l = cfg.tokens();
        let batch = TrainBatch {
            f_n: (0..2).map(|_| rand_map(&mut r, h, w, cfg.channels)).collect(),
            f_sa: (0..2).map(|_| rand_map(&mut r, h, w, cfg.channels)).collect(),
            g_sa: (0..2).map(|_| Array1::from_shape_fn(l, |t| (t % 2) as f64)).collect(),
        };
        let eps: Vec<f64> = (0..2 * l).map(|_| StandardNormal.sample(&mut r)).collect();
        let b = net.gradients(&batch, &eps, &eps).unwrap().breakdown;
        close(b.l_rec, b.l_local_mse + b.l_local_cos + b.l_global, 1e-12, "L_rec");
        close(b.l_aux, b.l_dis + cfg.uiapm.lambda * b.l_kl, 1e-12, "L_aux");
        close(b.l_final, b.l_rec + b.l_aux, 1e-12, "L_final");
    }
    "5 random runs".into()
}

pub fn anomaly_map_positions() -> String {
    let mut r = rng(28);
    let (h, w, c) = (4, 3, 6);
    let a = rand_map(&mut r, h, w, c);
    let b = rand_map(&mut r, h, w, c);
    let map = anomaly_map(&a, &b, (h, w)).unwrap();
    let expected = Array2::from_shape_fn((h, w), |(y, x)| {
        let (mut sq, mut dot, mut na, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for ch in 0..c {
            let (p, q) = (a.data()[[y, x, ch]], b.data()[[y, x, ch]]);
            sq += (p - q).powi(2);
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
        sq * (1.0 - dot / (na.sqrt() * nb.sqrt()))
    });
    let worst = close_arrays(&map.pixel_scores, &expected, 1e-12, "position scores");
    let n = (h * w) as f64;
    let mean = expected.sum() / n;
    let std = (expected.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    close(map.image_score, std, 1e-12, "image score");
    format!("max diff {worst:.1e}")
}

// ---- metrics ----

fn scored(scores: &[f64], labels: &[f64]) -> ScoredSet {
    ScoredSet::from_f64(scores.to_vec(), labels, Granularity::Image).unwrap()
}

pub fn auroc_example() -> String {
    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [false, false, true, true];
    let got = auroc(&scored(&scores, &[0.0, 0.0, 1.0, 1.0])).unwrap();
    assert_eq!(got, 0.75);
    assert_eq!(brute_auroc(&scores, &labels), 0.75);
    "0.75".into()
}

pub fn f1_exhaustive() -> String {
    let scores = [1.0, 2.0, 3.0, 4.0];
    let labels = [false, true, false, true];
    let set = scored(&scores, &[0.0, 1.0, 0.0, 1.0]);
    let (t, f1) = optimal_f1_threshold(&set).unwrap();
    let mut best = (f64::NAN, -1.0);
    for &cand in scores.iter().rev() {
        let (tp, fp, _, fn_) = loop_confusion(&scores, &labels, cand);
        let f = 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        if f >= best.1 {
            best = (cand, f);
        }
    }
    assert_eq!((t, f1), best);
    close(f1, 0.8, 1e-15, "best F1");
    format!("threshold {t}, F1 {f1}")
}

pub fn f1_all_anomalous() -> String {
    let mut r = rng(29);
    let scores: Vec<f64> = (0..30).map(|_| r.random_range(0.0..1.0)).collect();
    let labels: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let (p, n) = (10.0, 20.0);
    let (_, f1) = acc_f1(&scored(&scores, &labels), -1.0);
    close(f1, 2.0 * p / (p + n + p), 1e-15, "F1 below min");
    format!("{f1:.4}")
}

pub fn confusion_loops() -> String {
    let mut r = rng(30);
    for _ in 0..50 {
        let n = r.random_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..10) as f64) / 3.0).collect();
        let labels: Vec<bool> = (0..n).map(|i| i == 0 || (i != 1 && r.random_bool(0.5))).collect();
        let lf: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
        let threshold = r.random_range(0.0..3.0);
        let (acc, f1) = acc_f1(&scored(&scores, &lf), threshold);
        let (tp, fp, tn, fn_) = loop_confusion(&scores, &labels, threshold);
        close(acc, (tp + tn) as f64 / n as f64, 1e-15, "accuracy");
        let denom = 2 * tp + fp + fn_;
        let expected = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        close(f1, expected, 1e-15, "F1");
    }
    "50 random sets".into()
}

// ---- pipeline ----

pub fn toy_round_trip(root: &Path) -> String {
    let generated = super::small_dataset(root);
    let loaded = load_dataset(root, Layout::Mvtec, "stripes", true).unwrap();
    assert_eq!(generated, loaded);
    assert_eq!(loaded.train().count(), 8);
    assert!(loaded.train().all(|r| !r.anomalous));
    assert!(loaded.test().filter(|r| r.anomalous).all(|r| r.mask.is_some()));
    format!("{} records", loaded.records.len())
}

pub fn trivial_detector(root: &Path) -> String {
    let index = super::toy_dataset(root);
    let side = 64;
    let train: Vec<ImageTensor> = index.train().map(|r| ImageTensor::load(&r.path, side).unwrap()).collect();
    let mut mean = Array3::<f64>::zeros((side, side, 3));
    for img in &train {
        mean += img.pixels();
    }
    mean /= train.len() as f64;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for r in index.test() {
        let img = ImageTensor::load(&r.path, side).unwrap();
        scores.push((img.pixels() - &mean).mapv(f64::abs).mean().unwrap());
        labels.push(r.anomalous as u8 as f64);
    }
    let a = auroc(&scored(&scores, &labels)).unwrap();
    assert!(a > 0.5, "trivial detector AUROC {a}");
    format!("AUROC {a:.3}")
}

/// `L_final` at step 10 below step 1, counted over seeds 0..5.
pub fn smoke_training(root: &Path) -> String {
    super::toy_dataset(root);
    let mut wins = 0;
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let mut cfg = super::toy_config(root, &root.join("unused"), seed);
        cfg.optimizer.steps = Some(10);
        let mut t = Trainer::new(cfg).unwrap();
        let log: Vec<f64> = (0..10).map(|_| t.train_step().unwrap().losses.l_final).collect();
        deltas.push(log[9] - log[0]);
        if log[9] < log[0] {
            wins += 1;
        }
    }
    assert!(wins >= 4, "L_final fell in only {wins} of 5 seeds: {deltas:?}");
    format!("{wins}/5 seeds")
}

pub fn infer_artifacts(root: &Path) -> String {
    let index = super::small_dataset(&root.join("data"));
    let mut cfg = super::toy_config(&root.join("data"), &root.join("run"), 4);
    cfg.optimizer.steps = Some(3);
    let ck: Checkpoint = Trainer::new(cfg).unwrap().run().unwrap();
    let mut images: Vec<_> = index.test().map(|r| r.path.clone()).take(2).collect();
    // A non-square image at a different size from the training side.
    let odd = root.join("odd.png");
    image::RgbImage::from_fn(80, 48, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, 90])).save(&odd).unwrap();
    images.push(odd);
    let out = root.join("infer");
    let report = infer(&ck, &images, &out).unwrap();
    assert!(report.skipped.is_empty());
    let rows = read_scores(&out.join("scores.csv")).unwrap();
    assert_eq!(rows, report.rows);
    for (i, (path, row)) in images.iter().zip(&rows).enumerate() {
        let stem = format!("{i:04}_{}", path.file_stem().unwrap().to_string_lossy());
        let m = read_matrix(&out.join(format!("{stem}_scores.csv"))).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let std = (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        close(row.score, std, 1e-12 * std.max(1.0), "score vs matrix std");
        assert_eq!(row.score, image_score(&m));
        let dims = image::image_dimensions(path).unwrap();
        assert_eq!(image::image_dimensions(out.join(format!("{stem}_heatmap.png"))).unwrap(), dims);
        assert_eq!(m.dim(), (dims.1 as usize, dims.0 as usize));
    }
    let again = infer(&ck, &images, &root.join("infer2")).unwrap();
    assert_eq!(again.rows, report.rows);
    format!("{} images", rows.len())
}

pub fn variant_flags() -> String {
    let f = Variant::F.flags();
    assert!(f.use_fasm && f.use_uiapm && f.use_ram && f.remove_first_skip && !f.use_iasm);
    let a = Variant::A.flags();
    assert!(!a.use_fasm && !a.use_uiapm && !a.use_ram && !a.remove_first_skip && !a.use_iasm);
    "F all on, A all off".into()
}

/// Every oracle that needs no scratch directory.
pub fn pure() -> Vec<(&'static str, fn() -> String)> {
    vec![
        ("backbone: toy levels (8, 16, 32)", toy_backbone_levels),
        ("backbone: bilinear fuse vs scalar oracle", bilinear_fuse),
        ("fasm: Perlin area Monte Carlo band", perlin_area_band),
        ("fasm: posterize leaves <= 4 levels", posterize_levels),
        ("fasm: synthesis vs elementwise select", synthesis_select),
        ("uiapm: average-pool embedding", embedding_average_pool),
        ("uiapm: head vs affine oracle", head_affine),
        ("uiapm: reparameterized draw moments", sample_moments),
        ("uiapm: BCE vs scalar loop", bce_loop),
        ("uiapm: KL vs quadrature", kl_quadrature_match),
        ("uiapm: U, V Monte Carlo", uncertainty_monte_carlo),
        ("uiapm: two-sample U, V", two_sample_moments),
        ("uiapm: binarize worked example", binarize_example),
        ("uiapm: fused mask is a union", fusion_union),
        ("ram: hand-evaluated restoration attention", restoration_hand_example),
        ("ram: block residual vs MLP oracle", restoration_block_mlp),
        ("ram: refine block vs loop transformer", refine_block_loops),
        ("ram: unembed vs gather oracle", unembed_gather),
        ("ram: reconstruction gradients vs finite differences", reconstructor_gradients),
        ("ram: ReLU vs softmax attention differ", relu_differs_from_softmax),
        ("objectives: local MSE vs loops", local_mse_loops),
        ("objectives: loss breakdown sums", loss_breakdown_sums),
        ("objectives: anomaly map vs position oracle", anomaly_map_positions),
        ("metrics: AUROC worked example", auroc_example),
        ("metrics: optimal F1 vs exhaustive scan", f1_exhaustive),
        ("metrics: F1 with everything flagged", f1_all_anomalous),
        ("metrics: ACC/F1 vs confusion loops", confusion_loops),
        ("ablate: variant flags", variant_flags),
    ]
}

/// Oracles that write files under a scratch directory.
pub fn with_dir() -> Vec<(&'static str, fn(&Path) -> String)> {
    vec![
        ("dataset: toy round trip", toy_round_trip),
        ("dataset: trivial detector beats chance", trivial_detector),
        ("train: L_final falls over 10 steps", smoke_training),
        ("infer: artifacts match scores", infer_artifacts),
    ]
}
