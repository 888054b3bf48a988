//! Writes feature-level synthesis samples (masks and token labels) for inspection.
//!
//! cargo run --example synthesis_dump -- [data_root] [out_dir]

use std::path::PathBuf;

use uranet::config::RunConfig;
use uranet::dataset::{generate_toy_dataset, ToySpec};
use uranet::synthesize::dump_synthesis;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let root = args.next().map_or_else(|| PathBuf::from("data/toy"), PathBuf::from);
    let out = args.next().map_or_else(|| PathBuf::from("runs/synthesis"), PathBuf::from);
    let mut cfg = RunConfig::toy();
    cfg.dataset.root = root.clone();
    if !root.join(&cfg.dataset.category).is_dir() {
        generate_toy_dataset(&root, &ToySpec::new(&cfg.dataset.category, 32, 40, 0))?;
    }
    for s in dump_synthesis(&cfg, 8, &out)? {
        println!(
            "sample {}: normal {} source {} mask area {:.3} anomalous tokens {:.3}",
            s.index, s.normal_id, s.source_id, s.mask_area, s.token_fraction
        );
    }
    println!("images in {}", out.display());
    Ok(())
}
