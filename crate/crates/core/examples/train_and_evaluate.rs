//! Trains the full model on the toy dataset and evaluates it.
//!
//! cargo run --release --example train_and_evaluate -- [steps] [out_dir]

use std::path::PathBuf;

use uranet::config::RunConfig;
use uranet::dataset::{generate_toy_dataset, ToySpec};
use uranet::eval::{evaluate, write_evaluation};
use uranet::train::train;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(Ok(400), |s| s.parse())?;
    let out = args.next().map_or_else(|| PathBuf::from("runs/example"), PathBuf::from);
    let mut cfg = RunConfig::toy();
    cfg.dataset.root = out.join("data");
    cfg.out_dir = out.clone();
    cfg.optimizer.steps = Some(steps);
    generate_toy_dataset(&cfg.dataset.root, &ToySpec::new(&cfg.dataset.category, 32, 40, 0))?;

    let ck = train(cfg, None)?;
    let eval = evaluate(&ck)?;
    write_evaluation(&eval, &out)?;
    let r = &eval.results;
    println!("after {} steps: image AUROC {:.4}, F1 {:.4}, ACC {:.4}", ck.step, r.image.auroc, r.image.f1, r.image.acc);
    if let Some(p) = &r.pixel {
        println!("pixel AUROC {:.4}", p.auroc);
    }
    println!("{:.1} ms/image; outputs in {}", eval.timing.ms_per_image, out.display());
    Ok(())
}
