use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use uranet::ablate::{ablate, ordering_violations};
use uranet::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use uranet::config::{RunConfig, Variant};
use uranet::dataset::{generate_toy_dataset, ToySpec, TOY_CATEGORIES};
use uranet::eval::{evaluate, infer, write_evaluation, RESULTS_FILE, SCORES_FILE};
use uranet::synthesize::dump_synthesis;
use uranet::train::{train, LOG_FILE};

#[derive(Parser, Debug)]
#[command(name = "uranet", version, about = "Feature-reconstruction anomaly detection with uncertainty-guided restoration attention")]
struct Cli {
    /// Run configuration (TOML). Without it the chosen profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Toy)]
    profile: Profile,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root override.
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    category: Option<String>,
    /// Ablation variant A..F.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Toy,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural toy dataset.
    GenToy {
        #[arg(long, default_value_t = 32)]
        n_train: usize,
        #[arg(long, default_value_t = 40)]
        n_test: usize,
    },
    /// Train a model and write checkpoint.safetensors and train_log.jsonl.
    Train {
        /// Continue from this checkpoint (its config wins).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the step budget.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint on its test split.
    Eval {
        /// Defaults to <out>/checkpoint.safetensors.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score images and write heatmaps, raw score matrices and scores.csv.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Dump synthetic training anomalies for inspection.
    Synthesize {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train and evaluate several variants over shared seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "A,B,C,D,E,F")]
        variants: Vec<Variant>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => match self.profile {
                Profile::Toy => RunConfig::toy(),
                Profile::Paper => RunConfig::paper(),
            },
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(root) = &self.data_root {
            cfg.dataset.root = root.clone();
        }
        if let Some(cat) = &self.category {
            cfg.dataset.category = cat.clone();
        }
        if let Some(v) = self.variant {
            cfg = cfg.with_variant(v);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if !cli.device.eq_ignore_ascii_case("cpu") {
        bail!("device `{}` is not available; this build runs on cpu only", cli.device);
    }
    match &cli.command {
        Command::GenToy { n_train, n_test } => {
            let root = cli
                .data_root
                .clone()
                .or_else(|| cli.out.clone())
                .unwrap_or_else(|| RunConfig::toy().dataset.root);
            let seed = cli.seed.unwrap_or(0);
            let categories: Vec<&str> = match &cli.category {
                Some(c) => vec![c.as_str()],
                None => TOY_CATEGORIES.to_vec(),
            };
            for cat in categories {
                let index = generate_toy_dataset(&root, &ToySpec::new(cat, *n_train, *n_test, seed))?;
                println!("{}: {} records under {}", cat, index.records.len(), root.join(cat).display());
            }
        }
        Command::Train { resume, steps } => {
            let mut cfg = cli.run_config()?;
            if let Some(s) = steps {
                cfg.optimizer.steps = Some(*s);
            }
            let ck = match resume {
                Some(path) => {
                    let mut ck = Checkpoint::load(path)?;
                    if let Some(s) = steps {
                        ck.config.optimizer.steps = Some(*s);
                    }
                    if let Some(out) = &cli.out {
                        ck.config.out_dir = out.clone();
                    }
                    if let Some(root) = &cli.data_root {
                        ck.config.dataset.root = root.clone();
                    }
                    let data = uranet::train::TrainingData::load(&ck.config)?;
                    uranet::train::Trainer::resume(ck, data)?.run()?
                }
                None => train(cfg, None)?,
            };
            let out = &ck.config.out_dir;
            println!(
                "trained {} steps; wrote {} and {}",
                ck.step,
                out.join(CHECKPOINT_FILE).display(),
                out.join(LOG_FILE).display()
            );
        }
        Command::Eval { checkpoint } => {
            let base = cli.run_config()?;
            let path = checkpoint.clone().unwrap_or_else(|| base.out_dir.join(CHECKPOINT_FILE));
            let mut ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(root) = &cli.data_root {
                ck.config.dataset.root = root.clone();
            }
            if let Some(cat) = &cli.category {
                ck.config.dataset.category = cat.clone();
            }
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
            let eval = evaluate(&ck)?;
            write_evaluation(&eval, &out)?;
            let r = &eval.results;
            println!("image AUROC {:.4}  F1 {:.4}  ACC {:.4}", r.image.auroc, r.image.f1, r.image.acc);
            if let Some(p) = &r.pixel {
                println!("pixel AUROC {:.4}", p.auroc);
            }
            println!("{:.2} ms/image", eval.timing.ms_per_image);
            println!("wrote {} and {}", out.join(RESULTS_FILE).display(), out.join(SCORES_FILE).display());
        }
        Command::Infer { checkpoint, images } => {
            let ck = Checkpoint::load(checkpoint)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("infer_out"));
            let report = infer(&ck, images, &out)?;
            for row in &report.rows {
                println!("{},{}", row.path, row.score);
            }
            if !report.skipped.is_empty() {
                eprintln!("{} image(s) could not be read", report.skipped.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synthesize { count } => {
            let cfg = cli.run_config()?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.join("synthesis"));
            let samples = dump_synthesis(&cfg, *count, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Ablate { variants, seeds, steps } => {
            let mut cfg = cli.run_config()?;
            if let Some(s) = steps {
                cfg.optimizer.steps = Some(*s);
            }
            let table = ablate(&cfg, variants, seeds, &cfg.out_dir)?;
            print!("{}", table.to_markdown());
            for (hi, lo, gap) in ordering_violations(&table, 0.01) {
                println!("ordering: {hi} trails {lo} by {gap:.4}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
