//! Scores images with a saved checkpoint and writes heatmaps and scores.csv.
//!
//! cargo run --release --example infer_heatmaps -- <checkpoint> <out_dir> <image>...
//!
//! A checkpoint comes from `train_and_evaluate` or `uranet train`.

use std::path::PathBuf;

use anyhow::bail;
use uranet::checkpoint::Checkpoint;
use uranet::eval::infer;

fn main() -> anyhow::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if args.len() < 3 {
        bail!("usage: infer_heatmaps <checkpoint> <out_dir> <image>...");
    }
    let ck = Checkpoint::load(&args[0])?;
    let report = infer(&ck, &args[2..], &args[1])?;
    for row in &report.rows {
        println!("{:.5}  {}", row.score, row.path);
    }
    for (path, why) in &report.skipped {
        eprintln!("skipped {}: {why}", path.display());
    }
    Ok(())
}
