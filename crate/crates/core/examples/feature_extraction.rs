//! Runs the frozen seeded backbone on one toy image and prints the level shapes.
//!
//! cargo run --example feature_extraction

use uranet::backbone::FeatureExtractor;
use uranet::config::RunConfig;
use uranet::dataset::procedural_sources;

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig::toy();
    let extractor = FeatureExtractor::new(&cfg.backbone)?;
    let image = procedural_sources(1, cfg.dataset.image_size, 0).remove(0);
    for (i, level) in extractor.extract_multilevel(&image).iter().enumerate() {
        println!("level {i}: {:?}", level.data().dim());
    }
    let fused = extractor.extract(&image, cfg.model.feature_size)?;
    let (h, w, c) = fused.data().dim();
    let mean = fused.data().mean().unwrap_or(0.0);
    println!("fused: {h}x{w}x{c}, mean activation {mean:.4}");
    Ok(())
}
