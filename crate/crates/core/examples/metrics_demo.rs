//! Image-level metrics on a small tied score set.
//!
//! cargo run --example metrics_demo

use uranet::metrics::{auroc, detection_metrics, Granularity, ScoredSet};

fn main() -> anyhow::Result<()> {
    let scores = vec![0.1, 0.4, 0.35, 0.8, 0.4, 0.9, 0.2, 0.7];
    let labels = vec![false, false, true, true, true, true, false, false];
    let set = ScoredSet::new(scores, labels, Granularity::Image)?;
    println!("AUROC {:.4}", auroc(&set)?);
    let m = detection_metrics(&set)?;
    println!("F1 {:.4}  ACC {:.4} at threshold {:.3}", m.f1, m.acc, m.threshold);
    Ok(())
}
