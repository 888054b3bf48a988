//! Trains variants A..F over a few seeds and prints the ablation table.
//!
//! cargo run --release --example ablation_ladder -- [steps] [seeds, e.g. 0,1]

use std::path::Path;

use uranet::ablate::{ablate, ordering_violations};
use uranet::config::{RunConfig, Variant};
use uranet::dataset::{generate_toy_dataset, ToySpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(Ok(300), |s| s.parse())?;
    let seeds = args
        .next()
        .unwrap_or_else(|| "0".into())
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<u64>, _>>()?;
    let out = Path::new("runs/ablation");
    let mut cfg = RunConfig::toy();
    cfg.dataset.root = out.join("data");
    cfg.optimizer.steps = Some(steps);
    generate_toy_dataset(&cfg.dataset.root, &ToySpec::new(&cfg.dataset.category, 32, 40, 0))?;

    let table = ablate(&cfg, &Variant::ALL, &seeds, out)?;
    print!("{}", table.to_markdown());
    for (hi, lo, gap) in ordering_violations(&table, 0.01) {
        println!("{hi} trails {lo} by {gap:.4}");
    }
    Ok(())
}
