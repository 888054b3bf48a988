//! Run configuration, read from a single TOML document.
//!
//! Every key has a default, so an empty file is a valid paper-scale config.
//! The `[ablation]` table decides which modules are active; the derived model
//! flags are not read from the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::fasm::{AugRanges, PerlinParams};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `<root>/<category>/{train/good, test/<type>, ground_truth/<type>/<stem>_mask.png}`.
    Mvtec,
    /// `<root>/{train, test/normal, test/anomalous, masks/<stem>.png}`.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub layout: Layout,
    pub category: String,
    /// Square side images are resized to.
    pub image_size: usize,
    /// Require a ground-truth mask for every anomalous test image.
    pub pixel_eval: bool,
    /// Directory of anomaly-source images; `None` uses procedural textures.
    pub anomaly_source: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/mvtec"),
            layout: Layout::Mvtec,
            category: "bottle".into(),
            image_size: 256,
            pixel_eval: true,
            anomaly_source: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FasmConfig {
    /// Lattice resolutions and cut; the mask size follows the feature map.
    pub perlin: PerlinParams,
    pub source_ranges: AugRanges,
    pub normal_ranges: AugRanges,
    /// Ops drawn per source image.
    pub source_ops: usize,
    /// Apply the normal policy to training images.
    pub augment_normals: bool,
}

impl Default for FasmConfig {
    fn default() -> Self {
        Self {
            perlin: PerlinParams::default(),
            source_ranges: AugRanges::default(),
            normal_ranges: AugRanges::mild(),
            source_ops: 3,
            augment_normals: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixed step budget; overrides `epochs` when set.
    pub steps: Option<u64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            adamw: AdamWConfig::default(),
            batch_size: 8,
            epochs: 400,
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { checkpoint_every: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Seed for the test-time score draws.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_fasm: bool,
    /// Image-level Perlin pasting instead of feature-level synthesis.
    pub use_iasm: bool,
    pub use_uiapm: bool,
    pub use_ram: bool,
    pub remove_first_skip: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Variant::F.flags()
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.use_fasm && self.use_iasm {
            return Err(Error::Config("use_fasm and use_iasm are mutually exclusive".into()));
        }
        if self.remove_first_skip && !self.use_ram {
            return Err(Error::Config("remove_first_skip requires use_ram".into()));
        }
        Ok(())
    }

    pub fn synthesis(&self) -> Synthesis {
        match (self.use_fasm, self.use_iasm) {
            (true, _) => Synthesis::Feature,
            (false, true) => Synthesis::Image,
            (false, false) => Synthesis::None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Synthesis {
    None,
    Image,
    Feature,
}

/// Rows of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F];

    pub fn flags(self) -> AblationFlags {
        let off = AblationFlags {
            use_fasm: false,
            use_iasm: false,
            use_uiapm: false,
            use_ram: false,
            remove_first_skip: false,
        };
        match self {
            Variant::A => off,
            Variant::B => AblationFlags { use_iasm: true, ..off },
            Variant::C => AblationFlags { use_fasm: true, ..off },
            Variant::D => AblationFlags {
                use_fasm: true,
                use_uiapm: true,
                ..off
            },
            Variant::E => AblationFlags {
                use_fasm: true,
                use_uiapm: true,
                use_ram: true,
                ..off
            },
            Variant::F => AblationFlags {
                use_fasm: true,
                use_uiapm: true,
                use_ram: true,
                remove_first_skip: true,
                ..off
            },
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::A => "baseline reconstruction",
            Variant::B => "+ image-level synthesis",
            Variant::C => "+ feature-level synthesis",
            Variant::D => "+ uncertainty-integrated perception",
            Variant::E => "+ restoration attention",
            Variant::F => "+ first skip removed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            "F" => Ok(Variant::F),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected A..F)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub backbone: BackboneSpec,
    pub fasm: FasmConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl RunConfig {
    /// Full-size settings: 256² images, WideResNet-50-2 levels 1..3, 64² features.
    pub fn paper() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/paper"),
            dataset: DatasetConfig::default(),
            backbone: BackboneSpec::wide_resnet50(None),
            fasm: FasmConfig {
                perlin: PerlinParams {
                    height: 64,
                    width: 64,
                    ..PerlinParams::default()
                },
                ..FasmConfig::default()
            },
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationFlags::default(),
        }
    }

    /// Desk-scale settings for the generated toy dataset.
    pub fn toy() -> Self {
        Self {
            out_dir: PathBuf::from("runs/toy"),
            dataset: DatasetConfig {
                root: PathBuf::from("data/toy"),
                layout: Layout::Mvtec,
                category: "stripes".into(),
                image_size: 64,
                pixel_eval: true,
                anomaly_source: None,
            },
            backbone: BackboneSpec::toy(0),
            // A 16×16 feature map holds only 16 tokens: at the default cut of
            // 0.5 nearly every token touches the mask and training stalls.
            fasm: FasmConfig {
                perlin: PerlinParams {
                    threshold: 0.7,
                    ..PerlinParams::default()
                },
                ..FasmConfig::default()
            },
            model: ModelConfig::toy(),
            optimizer: OptimizerConfig {
                steps: Some(2000),
                ..OptimizerConfig::default()
            },
            train: TrainConfig { checkpoint_every: 0 },
            ..Self::paper()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.ablation = v.flags();
        self
    }

    /// Model settings with the ablation flags applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.use_uiapm = self.ablation.use_uiapm;
        m.reconstructor.restoration_attention = self.ablation.use_ram;
        m.reconstructor.first_residual = !self.ablation.remove_first_skip;
        m
    }

    /// Perlin parameters sized to the feature map (feature-level synthesis).
    pub fn feature_perlin(&self) -> PerlinParams {
        let (h, w) = self.model.feature_size;
        PerlinParams {
            height: h,
            width: w,
            ..self.fasm.perlin.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.model_config().validate()?;
        self.optimizer.adamw.validate()?;
        if self.optimizer.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.dataset.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        self.feature_perlin().validate()?;
        Ok(())
    }
}
