//! Training loop: batch synthesis, optimizer steps, structured log, checkpoints.
//!
//! Every step draws its randomness from a ChaCha8 stream selected by the step
//! index, so a run resumed from a checkpoint replays the same batches as an
//! uninterrupted one.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureExtractor, FeatureMap, ImageTensor};
use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::config::{RunConfig, Synthesis};
use crate::dataset::{list_images, load_dataset, procedural_sources, toy_source_dir};
use crate::error::{Error, Result};
use crate::fasm::{augment, nonempty_perlin_mask, synthesize_features, token_ground_truth, AnomalyMask, AugmentationPolicy, PerlinParams};
use crate::model::{TrainBatch, UraNet};
use crate::objectives::LossBreakdown;
use crate::optim::AdamW;

pub const LOG_FILE: &str = "train_log.jsonl";

/// Procedural sources generated when no source directory is available.
const FALLBACK_SOURCES: usize = 32;

/// Normal training images and anomaly-source images, decoded once.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub normals: Vec<ImageTensor>,
    pub sources: Vec<ImageTensor>,
}

impl TrainingData {
    /// Loads the train split, plus sources from `dataset.anomaly_source`, the
    /// toy source directory under the dataset root, or procedural textures.
    pub fn load(config: &RunConfig) -> Result<Self> {
        let ds = &config.dataset;
        let index = load_dataset(&ds.root, ds.layout, &ds.category, false)?;
        let side = ds.image_size;
        let normals = index
            .train()
            .map(|r| ImageTensor::load(&r.path, side))
            .collect::<Result<Vec<_>>>()?;
        let source_dir = match &ds.anomaly_source {
            Some(dir) if !dir.is_dir() => {
                return Err(Error::Dataset(format!("anomaly source directory {} does not exist", dir.display())))
            }
            Some(dir) => Some(dir.clone()),
            None => Some(toy_source_dir(&ds.root)).filter(|d| d.is_dir()),
        };
        let sources = match source_dir {
            Some(dir) => list_images(&dir)?
                .iter()
                .map(|p| ImageTensor::load(p, side))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let sources = if sources.is_empty() {
            procedural_sources(FALLBACK_SOURCES, side, config.seed ^ 0x5EED_50C5)
        } else {
            sources
        };
        Ok(Self { normals, sources })
    }
}

/// One line of the structured training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub masked_fraction: f64,
    /// Mean synthetic-anomaly token fraction in the batch.
    pub anomaly_fraction: f64,
}

/// Sampled batch plus the reparameterization draws for one step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub batch: TrainBatch,
    pub eps_sa: Vec<f64>,
    pub eps_n: Vec<f64>,
    pub normal_ids: Vec<usize>,
    pub source_ids: Vec<usize>,
    /// Synthesis masks (feature or image resolution); empty without synthesis.
    pub masks: Vec<AnomalyMask>,
}

#[derive(Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: UraNet,
    pub optimizer: AdamW,
    /// Completed steps.
    pub step: u64,
    extractor: FeatureExtractor,
    data: TrainingData,
    /// Features of the unaugmented normals, used when normal augmentation is off.
    plain: Vec<FeatureMap>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let data = TrainingData::load(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: RunConfig, data: TrainingData) -> Result<Self> {
        config.validate()?;
        let model = UraNet::new(&config.model_config(), config.seed)?;
        let optimizer = AdamW::new(config.optimizer.adamw.clone());
        Self::assemble(config, model, optimizer, 0, data)
    }

    pub fn resume(checkpoint: Checkpoint, data: TrainingData) -> Result<Self> {
        let Checkpoint {
            config,
            step,
            model,
            optimizer,
        } = checkpoint;
        Self::assemble(config, model, optimizer, step, data)
    }

    fn assemble(config: RunConfig, model: UraNet, optimizer: AdamW, step: u64, data: TrainingData) -> Result<Self> {
        if data.normals.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        if data.sources.is_empty() && config.ablation.synthesis() != Synthesis::None {
            return Err(Error::Dataset("synthesis enabled but no anomaly sources".into()));
        }
        let extractor = FeatureExtractor::new(&config.backbone)?;
        let channels = extractor.fused_channels();
        if channels != config.model.channels {
            return Err(Error::Config(format!(
                "backbone yields {channels} channels but model.channels = {}",
                config.model.channels
            )));
        }
        let plain = if config.fasm.augment_normals {
            Vec::new()
        } else {
            data.normals
                .iter()
                .map(|img| extractor.extract(img, config.model.feature_size))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            extractor,
            data,
            plain,
        })
    }

    /// Total step budget: `optimizer.steps`, else `epochs` passes over the train split.
    pub fn total_steps(&self) -> u64 {
        let o = &self.config.optimizer;
        o.steps
            .unwrap_or_else(|| (o.epochs * self.data.normals.len().div_ceil(o.batch_size)) as u64)
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    /// RNG for the step with 0-based index `step`.
    pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step + 1);
        rng
    }

    fn normal_features(&self, id: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
        let hw = self.config.model.feature_size;
        if !self.config.fasm.augment_normals {
            return Ok(self.plain[id].clone());
        }
        let policy = AugmentationPolicy {
            ranges: self.config.fasm.normal_ranges.clone(),
            ..AugmentationPolicy::normal(rng.random())
        };
        self.extractor.extract(&augment(&self.data.normals[id], &policy)?, hw)
    }

    fn source_image(&self, id: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let policy = AugmentationPolicy {
            ranges: self.config.fasm.source_ranges.clone(),
            n_ops: self.config.fasm.source_ops,
            ..AugmentationPolicy::source(rng.random())
        };
        augment(&self.data.sources[id], &policy)
    }

    /// Deterministic batch for the step with 0-based index `step`.
    pub fn sample_batch(&self, step: u64) -> Result<StepBatch> {
        let cfg = &self.config;
        let mut rng = Self::step_rng(cfg.seed, step);
        let b = cfg.optimizer.batch_size;
        let patch = cfg.model.uiapm.patch;
        let l = cfg.model.tokens();
        let mode = cfg.ablation.synthesis();
        let mut out = TrainBatch {
            f_n: Vec::with_capacity(b),
            f_sa: Vec::with_capacity(b),
            g_sa: Vec::with_capacity(b),
        };
        let (mut normal_ids, mut source_ids, mut masks) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..b {
            let nid = rng.random_range(0..self.data.normals.len());
            normal_ids.push(nid);
            match mode {
                Synthesis::None => {
                    let f_n = self.normal_features(nid, &mut rng)?;
                    out.f_sa.push(f_n.clone());
                    out.f_n.push(f_n);
                    out.g_sa.push(Array1::zeros(l));
                }
                Synthesis::Feature => {
                    let f_n = self.normal_features(nid, &mut rng)?;
                    let sid = rng.random_range(0..self.data.sources.len());
                    source_ids.push(sid);
                    let src = self.source_image(sid, &mut rng)?;
                    let f_src = self.extractor.extract(&src, cfg.model.feature_size)?;
                    let mask = nonempty_perlin_mask(
                        &PerlinParams {
                            seed: rng.random(),
                            ..cfg.feature_perlin()
                        },
                        patch,
                    )?;
                    out.f_sa.push(synthesize_features(&f_n, &f_src, &mask)?);
                    out.g_sa.push(token_ground_truth(&mask, patch)?);
                    out.f_n.push(f_n);
                    masks.push(mask);
                }
                Synthesis::Image => {
                    let (f_n, f_sa, g_sa, sid, mask) = self.image_level_pair(nid, &mut rng)?;
                    source_ids.push(sid);
                    masks.push(mask);
                    out.f_n.push(f_n);
                    out.f_sa.push(f_sa);
                    out.g_sa.push(g_sa);
                }
            }
        }
        let eps_sa = (0..b * l).map(|_| rng.sample(StandardNormal)).collect();
        let eps_n = (0..b * l).map(|_| rng.sample(StandardNormal)).collect();
        Ok(StepBatch {
            batch: out,
            eps_sa,
            eps_n,
            normal_ids,
            source_ids,
            masks,
        })
    }

    /// Image-level pasting: the augmented source replaces normal pixels under
    /// an image-resolution Perlin mask, and both images go through the backbone.
    fn image_level_pair(&self, nid: usize, rng: &mut ChaCha8Rng) -> Result<(FeatureMap, FeatureMap, Array1<f64>, usize, AnomalyMask)> {
        let cfg = &self.config;
        let hw = cfg.model.feature_size;
        let side = cfg.dataset.image_size;
        let normal = if cfg.fasm.augment_normals {
            let policy = AugmentationPolicy {
                ranges: cfg.fasm.normal_ranges.clone(),
                ..AugmentationPolicy::normal(rng.random())
            };
            augment(&self.data.normals[nid], &policy)?
        } else {
            self.data.normals[nid].clone()
        };
        let sid = rng.random_range(0..self.data.sources.len());
        let src = self.source_image(sid, rng)?;
        if side % hw.0 != 0 || hw.0 != hw.1 {
            return Err(Error::Config("image-level synthesis needs a square feature map dividing the image".into()));
        }
        let factor = side / hw.0;
        let patch = cfg.model.uiapm.patch;
        let mask = nonempty_perlin_mask(
            &PerlinParams {
                height: side,
                width: side,
                seed: rng.random(),
                ..cfg.fasm.perlin.clone()
            },
            patch * factor,
        )?;
        let pasted = paste_pixels(&normal, &src, &mask)?;
        let f_n = self.extractor.extract(&normal, hw)?;
        let f_sa = self.extractor.extract(&pasted, hw)?;
        let g_sa = token_ground_truth(&mask.max_pool(factor)?, patch)?;
        Ok((f_n, f_sa, g_sa, sid, mask))
    }

    /// One optimizer step. Non-finite losses or gradients abort with a dump
    /// written to the output directory.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let index = self.step;
        let sb = self.sample_batch(index)?;
        let out = self.model.gradients(&sb.batch, &sb.eps_sa, &sb.eps_n)?;
        let grads_finite = out.grads.values().all(|g| g.iter().all(|v| v.is_finite()));
        if !out.breakdown.is_finite() || !grads_finite {
            let dump = self.write_nan_dump(index, &sb, &out.breakdown)?;
            return Err(Error::NonFiniteLoss {
                step: index + 1,
                batch_seed: index + 1,
                dump,
            });
        }
        self.optimizer.update(&mut self.model, &out.grads);
        self.step += 1;
        let anomaly_fraction = sb.batch.g_sa.iter().map(|g| g.mean().unwrap_or(0.0)).sum::<f64>() / sb.batch.len() as f64;
        Ok(StepRecord {
            step: self.step,
            losses: out.breakdown,
            masked_fraction: out.masked_fraction,
            anomaly_fraction,
        })
    }

    fn write_nan_dump(&self, index: u64, sb: &StepBatch, losses: &LossBreakdown) -> Result<PathBuf> {
        let dir = &self.config.out_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("nan_dump_step{}.json", index + 1));
        let losses: serde_json::Value = [
            ("l_local_mse", losses.l_local_mse),
            ("l_local_cos", losses.l_local_cos),
            ("l_global", losses.l_global),
            ("l_rec", losses.l_rec),
            ("l_dis", losses.l_dis),
            ("l_kl", losses.l_kl),
            ("l_aux", losses.l_aux),
            ("l_final", losses.l_final),
        ]
        .into_iter()
        // JSON has no NaN, so non-finite values are written as strings.
        .map(|(k, v)| (k.to_string(), if v.is_finite() { v.into() } else { v.to_string().into() }))
        .collect::<serde_json::Map<_, _>>()
        .into();
        let doc = serde_json::json!({
            "seed": self.config.seed,
            "step": index + 1,
            "rng_stream": index + 1,
            "normal_ids": sb.normal_ids,
            "source_ids": sb.source_ids,
            "token_label_fraction": sb.batch.g_sa.iter().map(|g| g.mean().unwrap_or(0.0)).collect::<Vec<_>>(),
            "losses": losses,
        });
        let text = serde_json::to_string_pretty(&doc).expect("serializable");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Runs to the step budget, appending one JSON line per step to
    /// `out_dir/train_log.jsonl` and checkpointing to `out_dir/checkpoint.safetensors`.
    pub fn run(&mut self) -> Result<Checkpoint> {
        let out = self.config.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let log_path = out.join(LOG_FILE);
        let mut log = open_log(&log_path, self.step)?;
        let ck_path = out.join(CHECKPOINT_FILE);
        let every = self.config.train.checkpoint_every;
        while self.step < self.total_steps() {
            let record = self.train_step()?;
            let line = serde_json::to_string(&record).expect("serializable");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if every > 0 && self.step % every == 0 {
                self.checkpoint().save(&ck_path)?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let ck = self.checkpoint();
        ck.save(&ck_path)?;
        Ok(ck)
    }
}

/// Opens the log for appending after dropping records past `keep_until`
/// (steps logged after the checkpoint a run resumes from).
fn open_log(path: &Path, keep_until: u64) -> Result<File> {
    if keep_until == 0 {
        return File::create(path).map_err(|e| Error::io(path, e));
    }
    if path.exists() {
        let kept = read_log(path)?
            .into_iter()
            .filter(|r| r.step <= keep_until)
            .map(|r| serde_json::to_string(&r).expect("serializable") + "\n")
            .collect::<String>();
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{}: bad log line: {e}", path.display())))
        })
        .collect()
}

/// `(1 − M) ⊙ normal + M ⊙ source` on pixels.
pub fn paste_pixels(normal: &ImageTensor, source: &ImageTensor, mask: &AnomalyMask) -> Result<ImageTensor> {
    let (h, w) = (normal.height(), normal.width());
    if (source.height(), source.width()) != (h, w) || mask.dim() != (h, w) {
        return Err(Error::shape("paste_pixels", format!("{h}x{w}"), format!("{:?}", mask.dim())));
    }
    let mut out = normal.pixels().clone();
    Zip::indexed(&mut out).for_each(|(y, x, c), v| {
        if mask.values()[[y, x]] == 1.0 {
            *v = source.pixels()[[y, x, c]];
        }
    });
    ImageTensor::new(out)
}

/// Trains from scratch with `config`, or resumes from `resume` when given.
pub fn train(config: RunConfig, resume: Option<&Path>) -> Result<Checkpoint> {
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let data = TrainingData::load(&ck.config)?;
            Trainer::resume(ck, data)?
        }
        None => Trainer::new(config)?,
    };
    trainer.run()
}
