//! Shared fixtures and check bodies for the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod props;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uranet::backbone::FeatureMap;
use uranet::config::RunConfig;
use uranet::dataset::{generate_toy_dataset, DatasetIndex, ToySpec};
use uranet::model::{ModelConfig, UiapmConfig};
use uranet::ram::ReconstructorConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform2(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn uniform1(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(-scale..scale))
}

pub fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::new(Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0))).unwrap()
}

/// Smallest profile that still exercises multi-head attention, two tokens per
/// sample and every parameter group.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: 3,
        feature_size: (2, 4),
        uiapm: UiapmConfig {
            patch: 2,
            ..UiapmConfig::default()
        },
        reconstructor: ReconstructorConfig {
            n_restoration_blocks: 1,
            n_refine_blocks: 1,
            heads: 2,
            dim: 4,
            mlp_ratio: 2,
            ..ReconstructorConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Toy run configuration over a generated dataset at `root`.
pub fn toy_config(root: &Path, out: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.dataset.root = root.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg.seed = seed;
    cfg
}

/// The toy split used for calibration: stripes, 32 train, 40 test, seed 0.
pub fn toy_dataset(root: &Path) -> DatasetIndex {
    generate_toy_dataset(root, &ToySpec::new("stripes", 32, 40, 0)).unwrap()
}

/// Small dataset for plumbing tests.
pub fn small_dataset(root: &Path) -> DatasetIndex {
    let spec = ToySpec {
        n_sources: 4,
        ..ToySpec::new("stripes", 8, 6, 3)
    };
    generate_toy_dataset(root, &spec).unwrap()
}

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// Runs a check that reports failure by panicking.
pub fn run_check<F: FnOnce() -> String>(f: F) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    match result {
        Ok(detail) => Outcome {
            passed: true,
            detail,
            elapsed,
        },
        Err(e) => {
            let detail = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Outcome {
                passed: false,
                detail,
                elapsed,
            }
        }
    }
}
