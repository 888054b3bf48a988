//! Versioned run checkpoints in safetensors format.
//!
//! Tensors are stored as little-endian f64 under `param/<name>`,
//! `adam.m/<name>` and `adam.v/<name>`. The header metadata carries the format
//! version, the run config (TOML), the step counter and the optimizer step.
//! Per-step randomness is derived from `(seed, step)`, so the step counter is
//! the whole RNG state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::UraNet;
use crate::nn::Module;
use crate::optim::{AdamW, Moments};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training steps.
    pub step: u64,
    pub model: UraNet,
    pub optimizer: AdamW,
}

const META_KEY: &str = "ura_net";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    step: u64,
    optimizer_step: u64,
    config: String,
}

fn bytes_of(a: &Array2<f64>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
        self.model.visit("", &mut |name, p| {
            tensors.insert(format!("param/{name}"), (p.shape().to_vec(), bytes_of(p)));
        });
        for (name, m) in &self.optimizer.state {
            tensors.insert(format!("adam.m/{name}"), (m.m.shape().to_vec(), bytes_of(&m.m)));
            tensors.insert(format!("adam.v/{name}"), (m.v.shape().to_vec(), bytes_of(&m.v)));
        }
        let views = tensors
            .iter()
            .map(|(k, (shape, data))| Ok((k.clone(), TensorView::new(Dtype::F64, shape.clone(), data).map_err(err)?)))
            .collect::<Result<Vec<_>>>()?;
        // A single metadata entry: the header map is a HashMap, and one key keeps
        // the file bytes deterministic.
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            optimizer_step: self.optimizer.step,
            config: self.config.to_toml_string(),
        };
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header).map_err(err)?)]);
        safetensors::serialize(views, &Some(meta)).map_err(err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(err)?;
        let meta = header.metadata().clone().unwrap_or_default();
        let raw = meta.get(META_KEY).ok_or_else(|| err(format!("missing metadata `{META_KEY}`")))?;
        let header: Header = serde_json::from_str(raw).map_err(err)?;
        let version = header.format_version;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let config = RunConfig::from_toml_str(&header.config)?;
        let (step, opt_step) = (header.step, header.optimizer_step);
        let st = SafeTensors::deserialize(bytes).map_err(err)?;
        let read = |name: &str| -> Result<Option<Array2<f64>>> {
            let view = match st.tensor(name) {
                Ok(v) => v,
                Err(_) => return Ok(None),
            };
            if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
                return Err(err(format!("tensor `{name}` must be a 2-d f64 array")));
            }
            let values = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Array2::from_shape_vec((view.shape()[0], view.shape()[1]), values)
                .map(Some)
                .map_err(err)
        };

        let mut model = UraNet::new(&config.model_config(), config.seed)?;
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match read(&format!("param/{name}")) {
                Ok(Some(v)) if v.dim() == p.dim() => *p = v,
                Ok(Some(v)) => failure = Some(err(format!("`{name}` has shape {:?}, expected {:?}", v.dim(), p.dim()))),
                Ok(None) => failure = Some(err(format!("missing parameter `{name}`"))),
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let params = model.named_parameters();
        let mut optimizer = AdamW::new(config.optimizer.adamw.clone());
        optimizer.step = opt_step;
        for name in params.keys() {
            if let (Some(m), Some(v)) = (read(&format!("adam.m/{name}"))?, read(&format!("adam.v/{name}"))?) {
                optimizer.state.insert(name.clone(), Moments { m, v });
            }
        }
        Ok(Self {
            config,
            step,
            model,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
