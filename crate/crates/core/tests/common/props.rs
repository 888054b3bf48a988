//! Property bodies shared by the proptest suites and the acceptance runner.

use std::collections::BTreeSet;

use ndarray::Array1;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use uranet::metrics::{auroc, Granularity, ScoredSet};
use uranet::ram::{restoration_attention, restoration_block, AttentionWeights, RestorationBlock};
use uranet::uiapm::{binarize, fuse_masks, kl_loss, KeepDirection, MaskFusionResult, ScoreDistribution, TokenMask, TokenSequence};

use super::{gradcheck::randomize, rng};

pub const ISOLATION_TOL: f64 = 1e-12;

/// Runs `check` on `cases` draws of `strategy`; the error names the minimal failing input.
pub fn run<S, F>(cases: u32, strategy: S, check: F) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new(config).run(&strategy, check).map_err(|e| e.to_string())
}

// ---- masked attention ----

#[derive(Clone, Debug)]
pub struct AttentionCase {
    pub seed: u64,
    pub heads: usize,
    pub head_dim: usize,
    pub keep: Vec<bool>,
    /// Index into the masked-out tokens.
    pub pick: usize,
    pub delta: Vec<f64>,
}

pub fn attention_case() -> impl Strategy<Value = AttentionCase> {
    (any::<u64>(), 1usize..=3, 1usize..=3, prop::collection::vec(any::<bool>(), 2..=7))
        .prop_flat_map(|(seed, heads, head_dim, mut keep)| {
            // At least one token must be masked out.
            let n = keep.len();
            keep[seed as usize % n] = false;
            let d = heads * head_dim;
            (
                Just(seed),
                Just(heads),
                Just(head_dim),
                Just(keep),
                0usize..n,
                prop::collection::vec(-2.0f64..2.0, d),
            )
        })
        .prop_map(|(seed, heads, head_dim, keep, pick, delta)| AttentionCase {
            seed,
            heads,
            head_dim,
            keep,
            pick,
            delta,
        })
}

fn random_block(seed: u64, dim: usize, heads: usize) -> RestorationBlock {
    let mut r = rng(seed);
    let mut block = RestorationBlock::new(&mut r, dim, heads, 2, false);
    randomize(&mut block, seed ^ 0xB10C);
    block.attn = AttentionWeights::random(&mut r, dim, heads);
    block
}

/// Perturbing a masked-out token moves no other token's attention or block output.
pub fn check_isolation(c: AttentionCase) -> Result<(), TestCaseError> {
    let d = c.heads * c.head_dim;
    let l = c.keep.len();
    let block = random_block(c.seed, d, c.heads);
    let mut r = rng(c.seed.wrapping_add(1));
    let x = super::uniform2(&mut r, (l, d), 1.5);
    let masked: Vec<usize> = (0..l).filter(|&t| !c.keep[t]).collect();
    let t = masked[c.pick % masked.len()];
    let mut y = x.clone();
    for (j, dv) in c.delta.iter().enumerate() {
        y[[t, j]] += dv;
    }
    let keep = TokenMask::new(c.keep.clone()).to_f64();
    let (sx, sy) = (TokenSequence::new(x).unwrap(), TokenSequence::new(y).unwrap());
    let pairs = [
        (
            restoration_attention(&sx, &keep, &block.attn).unwrap(),
            restoration_attention(&sy, &keep, &block.attn).unwrap(),
        ),
        (
            restoration_block(&sx, &keep, &block).unwrap(),
            restoration_block(&sy, &keep, &block).unwrap(),
        ),
    ];
    for (a, b) in &pairs {
        for i in (0..l).filter(|&i| i != t) {
            for j in 0..d {
                let diff = (a.tokens()[[i, j]] - b.tokens()[[i, j]]).abs();
                prop_assert!(diff <= ISOLATION_TOL, "token {i} moved by {diff} after perturbing masked token {t}");
            }
        }
    }
    Ok(())
}

/// With every token masked out the block output does not depend on its input.
pub fn check_all_masked(c: AttentionCase) -> Result<(), TestCaseError> {
    let d = c.heads * c.head_dim;
    let l = c.keep.len();
    let block = random_block(c.seed, d, c.heads);
    let mut r = rng(c.seed.wrapping_add(2));
    let keep = vec![0.0; l];
    let a = restoration_block(&TokenSequence::new(super::uniform2(&mut r, (l, d), 3.0)).unwrap(), &keep, &block).unwrap();
    let b = restoration_block(&TokenSequence::new(super::uniform2(&mut r, (l, d), 3.0)).unwrap(), &keep, &block).unwrap();
    let diff = (a.tokens() - b.tokens()).fold(0.0f64, |m, v| m.max(v.abs()));
    prop_assert!(diff <= ISOLATION_TOL, "all-masked outputs differ by {diff}");
    Ok(())
}

// ---- KL, binarization, fusion ----

fn kl_single(u: f64, sigma: f64) -> f64 {
    kl_loss(&ScoreDistribution::new(Array1::from(vec![u]), Array1::from(vec![sigma])).unwrap()).unwrap()
}

pub fn kl_case() -> impl Strategy<Value = (f64, f64)> {
    (-20.0f64..20.0, 1e-3f64..20.0)
}

pub fn check_kl_nonnegative((u, sigma): (f64, f64)) -> Result<(), TestCaseError> {
    let kl = kl_single(u, sigma);
    prop_assert!(kl >= 0.0, "KL({u}, {sigma}) = {kl}");
    Ok(())
}

/// Grid scan: KL is zero exactly at `(0, 1)` and positive elsewhere.
pub fn kl_grid() -> Result<usize, String> {
    let mut points = 0;
    for i in -24..=24 {
        for j in 1..=48 {
            let (u, sigma) = (i as f64 * 0.125, j as f64 * 0.0625);
            let kl = kl_single(u, sigma);
            points += 1;
            let at_origin = i == 0 && j == 16;
            if at_origin && kl != 0.0 {
                return Err(format!("KL(0, 1) = {kl}"));
            }
            if !at_origin && kl <= 0.0 {
                return Err(format!("KL({u}, {sigma}) = {kl} is not positive"));
            }
        }
    }
    Ok(points)
}

#[derive(Clone, Debug)]
pub struct AffineCase {
    pub seq: Vec<f64>,
    pub gamma: f64,
    pub scale: f64,
    pub shift: f64,
}

pub fn affine_case() -> impl Strategy<Value = AffineCase> {
    (
        prop::collection::vec(-10.0f64..10.0, 3..=64),
        0.0f64..3.0,
        1e-3f64..1e3,
        -1e3f64..1e3,
    )
        .prop_map(|(seq, gamma, scale, shift)| AffineCase { seq, gamma, scale, shift })
}

pub fn check_affine_invariance(c: AffineCase) -> Result<(), TestCaseError> {
    let x = Array1::from(c.seq.clone());
    let y = x.mapv(|v| c.scale * v + c.shift);
    for dir in [KeepDirection::KeepLow, KeepDirection::KeepHigh] {
        prop_assert_eq!(binarize(&x, c.gamma, dir), binarize(&y, c.gamma, dir), "direction {:?}", dir);
    }
    Ok(())
}

pub fn mask_pair() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..=64).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

pub fn check_union((a, b): (Vec<bool>, Vec<bool>)) -> Result<(), TestCaseError> {
    let (ma, mb) = (TokenMask::new(a), TokenMask::new(b));
    let fused = fuse_masks(&ma, &mb).unwrap();
    let union: BTreeSet<usize> = ma.masked_out().union(&mb.masked_out()).copied().collect();
    prop_assert_eq!(fused.masked_out(), union);
    Ok(())
}

pub fn moments_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (2usize..=48).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.0f64..3.0, n),
            0.0f64..2.0,
        )
    })
}

/// The fused mask drops exactly the tokens either map drops.
pub fn check_fusion_union((u, v, gamma): (Vec<f64>, Vec<f64>, f64)) -> Result<(), TestCaseError> {
    let r = MaskFusionResult::from_moments(Array1::from(u), Array1::from(v), gamma);
    let union: BTreeSet<usize> = r.m_u.masked_out().union(&r.m_v.masked_out()).copied().collect();
    prop_assert_eq!(r.m_final.masked_out(), union);
    Ok(())
}

// ---- AUROC ----

#[derive(Clone, Debug)]
pub struct ScoredCase {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Up to 200 points on a coarse grid (so ties are common) with both classes present.
pub fn scored_case() -> impl Strategy<Value = ScoredCase> {
    (2usize..=200, 1u32..=60)
        .prop_flat_map(|(n, levels)| {
            (
                prop::collection::vec(0..levels, n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(grid, mut labels)| {
            let n = labels.len();
            labels[0] = true;
            labels[n - 1] = false;
            ScoredCase {
                scores: grid.into_iter().map(|g| g as f64 * 0.25 - 3.0).collect(),
                labels,
            }
        })
}

/// `Σ_{pos, neg} [s⁺ > s⁻] + ½[s⁺ = s⁻]` over all pairs, divided by `P·N`.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice: u64 = 0;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    twice as f64 / (2 * p * n) as f64
}

fn set(scores: Vec<f64>, labels: Vec<bool>) -> ScoredSet {
    ScoredSet::new(scores, labels, Granularity::Image).unwrap()
}

pub fn check_auroc_brute(c: ScoredCase) -> Result<(), TestCaseError> {
    let fast = auroc(&set(c.scores.clone(), c.labels.clone())).unwrap();
    let slow = brute_auroc(&c.scores, &c.labels);
    prop_assert_eq!(fast.to_bits(), slow.to_bits(), "sorted {} vs brute {}", fast, slow);
    Ok(())
}

pub fn check_auroc_monotone(c: ScoredCase) -> Result<(), TestCaseError> {
    let base = auroc(&set(c.scores.clone(), c.labels.clone())).unwrap();
    let transforms: [(&str, fn(f64) -> f64); 3] = [
        ("exp", |x| x.exp()),
        ("cubic", |x| x * x * x + x),
        ("affine", |x| 7.0 * x - 100.0),
    ];
    for (name, f) in transforms {
        let moved = auroc(&set(c.scores.iter().map(|&s| f(s)).collect(), c.labels.clone())).unwrap();
        prop_assert_eq!(base.to_bits(), moved.to_bits(), "{} changed AUROC {} -> {}", name, base, moved);
    }
    Ok(())
}

/// Confusion counts by explicit loop, for cross-checks.
pub fn loop_confusion(scores: &[f64], labels: &[bool], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for i in 0..scores.len() {
        let predicted = scores[i] >= threshold;
        match (predicted, labels[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    (tp, fp, tn, fn_)
}
