//! Generates the procedural toy dataset.
//!
//! cargo run --example toy_dataset -- [out_dir]

use std::path::PathBuf;

use uranet::dataset::{generate_toy_dataset, ToySpec, TOY_CATEGORIES};

fn main() -> anyhow::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| PathBuf::from("data/toy"), PathBuf::from);
    for cat in TOY_CATEGORIES {
        let index = generate_toy_dataset(&root, &ToySpec::new(cat, 32, 40, 0))?;
        let anomalous = index.test().filter(|r| r.anomalous).count();
        println!(
            "{cat}: {} train, {} test ({anomalous} anomalous) in {}",
            index.train().count(),
            index.test().count(),
            root.join(cat).display()
        );
    }
    Ok(())
}
