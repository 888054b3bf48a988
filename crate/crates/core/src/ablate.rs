//! Ablation ladder: train and evaluate variants A..F over shared seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_evaluation};
use crate::train::Trainer;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Mean over seeds per variant, in ladder order.
    pub fn summary(&self) -> Vec<VariantSummary> {
        let mut variants: Vec<Variant> = self.runs.iter().map(|r| r.variant).collect();
        variants.sort();
        variants.dedup();
        variants
            .into_iter()
            .map(|v| {
                let runs: Vec<_> = self.runs.iter().filter(|r| r.variant == v).collect();
                let n = runs.len() as f64;
                let pixel: Option<Vec<f64>> = runs.iter().map(|r| r.pixel_auroc).collect();
                VariantSummary {
                    variant: v,
                    image_auroc: runs.iter().map(|r| r.image_auroc).sum::<f64>() / n,
                    pixel_auroc: pixel.map(|p| p.iter().sum::<f64>() / n),
                    runs: runs.len(),
                }
            })
            .collect()
    }

    pub fn mean_image_auroc(&self, v: Variant) -> Option<f64> {
        self.summary().into_iter().find(|s| s.variant == v).map(|s| s.image_auroc)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| variant | description | image AUROC | pixel AUROC | runs |\n|---|---|---|---|---|\n");
        for s in self.summary() {
            let pixel = s.pixel_auroc.map_or("n/a".to_string(), |p| format!("{p:.4}"));
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {pixel} | {} |",
                s.variant,
                s.variant.describe(),
                s.image_auroc,
                s.runs
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ABLATION_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        for r in &self.runs {
            w.serialize(r).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let md = dir.join(ABLATION_MD);
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

/// Trains and evaluates one variant/seed under `base`, writing its artifacts to `out_dir`.
pub fn run_variant(base: &RunConfig, variant: Variant, seed: u64, out_dir: &Path) -> Result<AblationRun> {
    let mut cfg = base.clone().with_variant(variant);
    cfg.seed = seed;
    cfg.out_dir = out_dir.to_path_buf();
    let ck = Trainer::new(cfg)?.run()?;
    let eval = evaluate(&ck)?;
    write_evaluation(&eval, out_dir)?;
    Ok(AblationRun {
        variant,
        seed,
        image_auroc: eval.results.image.auroc,
        pixel_auroc: eval.results.pixel.map(|p| p.auroc),
    })
}

/// Every variant on every seed; runs land in `out_dir/<variant>/seed<k>`.
pub fn ablate(base: &RunConfig, variants: &[Variant], seeds: &[u64], out_dir: &Path) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("ablation needs at least one variant and one seed"));
    }
    let mut table = AblationTable::default();
    for &v in variants {
        for &seed in seeds {
            let run = run_variant(base, v, seed, &out_dir.join(v.to_string()).join(format!("seed{seed}")))?;
            log::info!(
                "variant {v} seed {seed}: image AUROC {:.4}, pixel AUROC {}",
                run.image_auroc,
                run.pixel_auroc.map_or("n/a".into(), |p| format!("{p:.4}"))
            );
            table.runs.push(run);
        }
    }
    table.write(out_dir)?;
    Ok(table)
}

/// Adjacent pairs `(better, worse)` of the ladder F ≥ E ≥ D ≥ C ≥ A whose
/// mean image AUROC gap exceeds `slack` in the wrong direction.
pub fn ordering_violations(table: &AblationTable, slack: f64) -> Vec<(Variant, Variant, f64)> {
    use Variant::*;
    [(F, E), (E, D), (D, C), (C, A)]
        .into_iter()
        .filter_map(|(hi, lo)| {
            let (h, l) = (table.mean_image_auroc(hi)?, table.mean_image_auroc(lo)?);
            (h < l - slack).then_some((hi, lo, l - h))
        })
        .collect()
}
