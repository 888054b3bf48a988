//! Multi-level feature extraction from a frozen convolutional backbone.
//!
//! Images and feature maps are stored height-major with channels last
//! (`H × W × C`). A backbone exposes numbered levels starting at 1; each level
//! is the output of one convolutional stage. [`fuse_levels`] resizes the
//! selected levels to a common spatial size with bilinear interpolation and
//! concatenates them along channels, giving the reconstruction target.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, shape `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidParameter(format!("image must be non-empty, got {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::shape("ImageTensor", "3 channels", c));
        }
        Ok(Self { pixels })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self { pixels }
    }

    /// Loads an image from disk and resizes it to `side × side`.
    pub fn load(path: &Path, side: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rgb = img.to_rgb8();
        if rgb.width() as usize != side || rgb.height() as usize != side {
            rgb = image::imageops::resize(
                &rgb,
                side as u32,
                side as u32,
                image::imageops::FilterType::Triangle,
            );
        }
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, _) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }
}

/// Dense activation map of shape `H_F × W_F × C_F`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature map dimensions must be positive, got {h}x{w}x{c}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("feature map contains non-finite values".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    /// `(height, width, channels)`
    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Spatial positions as rows, in row-major `(h, w)` order: `(H·W) × C`.
    pub fn to_rows(&self) -> Array2<f64> {
        let (h, w, c) = self.dim();
        self.data
            .clone()
            .into_shape_with_order((h * w, c))
            .expect("standard layout")
    }

    pub fn from_rows(rows: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let c = rows.ncols();
        if rows.nrows() != height * width {
            return Err(Error::shape("FeatureMap::from_rows", height * width, rows.nrows()));
        }
        let data = rows
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((height, width, c))
            .expect("row count checked");
        Self::new(data)
    }

    pub(crate) fn ensure_same_dim(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::shape(op, format!("{:?}", self.dim()), format!("{:?}", other.dim())));
        }
        Ok(())
    }
}

/// Identity of the frozen backbone and which of its levels to fuse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub name: String,
    /// 1-based level indices, fused in this order.
    pub levels: Vec<usize>,
    /// Backbones are never trained; kept for the record in configs.
    pub frozen: bool,
    /// Weight seed for the toy backbone.
    pub seed: u64,
    /// Per-channel input normalization.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Local weight file for pretrained backbones.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::toy(0)
    }
}

impl BackboneSpec {
    pub fn toy(seed: u64) -> Self {
        Self {
            name: TOY_BACKBONE.into(),
            levels: vec![1, 2, 3],
            frozen: true,
            seed,
            mean: [0.0; 3],
            std: [1.0; 3],
            weights: None,
        }
    }

    /// WideResNet-50-2 stages 1..=3 (256 + 512 + 1024 = 1792 channels) with
    /// ImageNet normalization.
    pub fn wide_resnet50(weights: Option<PathBuf>) -> Self {
        Self {
            name: WIDE_RESNET50.into(),
            levels: vec![1, 2, 3],
            frozen: true,
            seed: 0,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            weights,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::EmptyInput("backbone levels"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidParameter("normalization std must be positive".into()));
        }
        Ok(())
    }
}

pub const TOY_BACKBONE: &str = "toy";
pub const WIDE_RESNET50: &str = "wide_resnet50_2";

/// A frozen feature extractor with numbered levels (1-based).
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    /// Channel count of every level, index 0 = level 1.
    fn level_channels(&self) -> Vec<usize>;

    /// Runs the network on a normalized image and returns the requested levels.
    /// Level indices have already been validated.
    fn forward_levels(&self, image: &Array3<f64>, levels: &[usize]) -> Vec<Array3<f64>>;

    fn num_levels(&self) -> usize {
        self.level_channels().len()
    }
}

type BackboneFactory = Box<dyn Fn(&BackboneSpec) -> Result<Arc<dyn Backbone>> + Send + Sync>;

/// Backbone constructors keyed by name.
pub struct BackboneRegistry {
    factories: BTreeMap<String, BackboneFactory>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register(TOY_BACKBONE, |spec| Ok(Arc::new(ToyBackbone::new(spec.seed, &TOY_WIDTHS))));
        reg.register(WIDE_RESNET50, |spec| {
            let max_level = spec.levels.iter().copied().max().unwrap_or(1);
            let net = match &spec.weights {
                Some(path) => WideResNet50::load(path, max_level)?,
                None => {
                    log::warn!("no weights given for {WIDE_RESNET50}; using random initialization");
                    WideResNet50::random(spec.seed, max_level)
                }
            };
            Ok(Arc::new(net))
        });
        reg
    }
}

impl BackboneRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&BackboneSpec) -> Result<Arc<dyn Backbone>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, spec: &BackboneSpec) -> Result<Arc<dyn Backbone>> {
        spec.validate()?;
        let factory = self
            .factories
            .get(&spec.name)
            .ok_or_else(|| Error::UnknownBackbone(spec.name.clone()))?;
        factory(spec)
    }
}

/// A built backbone together with its spec.
#[derive(Clone)]
pub struct FeatureExtractor {
    spec: BackboneSpec,
    backbone: Arc<dyn Backbone>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("spec", &self.spec).finish()
    }
}

impl FeatureExtractor {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        Self::with_registry(spec, &BackboneRegistry::default())
    }

    pub fn with_registry(spec: &BackboneSpec, registry: &BackboneRegistry) -> Result<Self> {
        let backbone = registry.build(spec)?;
        let max = backbone.num_levels();
        if let Some(&bad) = spec.levels.iter().find(|&&l| l == 0 || l > max) {
            return Err(Error::LevelOutOfRange {
                backbone: spec.name.clone(),
                level: bad,
                max,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            backbone,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Total channel count of the fused map.
    pub fn fused_channels(&self) -> usize {
        let widths = self.backbone.level_channels();
        self.spec.levels.iter().map(|&l| widths[l - 1]).sum()
    }

    pub fn extract_multilevel(&self, image: &ImageTensor) -> Vec<FeatureMap> {
        let mut x = image.pixels().clone();
        for mut px in x.lanes_mut(Axis(2)) {
            for c in 0..3 {
                px[c] = (px[c] - self.spec.mean[c]) / self.spec.std[c];
            }
        }
        self.backbone
            .forward_levels(&x, &self.spec.levels)
            .into_iter()
            .map(|data| FeatureMap {
                data: data.as_standard_layout().into_owned(),
            })
            .collect()
    }

    /// Multi-level features fused to `target_hw`.
    pub fn extract(&self, image: &ImageTensor, target_hw: (usize, usize)) -> Result<FeatureMap> {
        fuse_levels(&self.extract_multilevel(image), target_hw)
    }
}

/// One feature map per level in `spec.levels`, using the default registry.
pub fn extract_multilevel(image: &ImageTensor, spec: &BackboneSpec) -> Result<Vec<FeatureMap>> {
    Ok(FeatureExtractor::new(spec)?.extract_multilevel(image))
}

/// Resizes every level to `target_hw` and concatenates along channels in input order.
pub fn fuse_levels(features: &[FeatureMap], target_hw: (usize, usize)) -> Result<FeatureMap> {
    if features.is_empty() {
        return Err(Error::EmptyInput("fuse_levels requires at least one level"));
    }
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidParameter(format!("target size must be positive, got {th}x{tw}")));
    }
    let total: usize = features.iter().map(FeatureMap::channels).sum();
    let mut out = Array3::zeros((th, tw, total));
    let mut offset = 0;
    for level in features {
        let c = level.channels();
        let resized = resize_bilinear(level.data().view(), th, tw);
        out.slice_mut(s![.., .., offset..offset + c]).assign(&resized);
        offset += c;
    }
    FeatureMap::new(out)
}

/// Bilinear resize of an `H × W × C` array, half-pixel centers
/// (align-corners off), sampling coordinates clamped at the border.
pub fn resize_bilinear(input: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (in_h, in_w, c) = input.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return input.to_owned();
    }
    let ys = interp_axis(in_h, out_h);
    let xs = interp_axis(in_w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = input[[y0, x0, ch]] * (1.0 - lx) + input[[y0, x1, ch]] * lx;
                let bottom = input[[y1, x0, ch]] * (1.0 - lx) + input[[y1, x1, ch]] * lx;
                out[[oy, ox, ch]] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    out
}

/// `(low index, high index, weight of high)` per output coordinate.
fn interp_axis(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// 2-D convolution with weights laid out as `(k·k·C_in) × C_out`, row index
/// `(ky·k + kx)·C_in + c_in`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Array2<f64>,
    bias: Array1<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, kernel: usize, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.ncols(), bias.len());
        assert_eq!(weight.nrows() % (kernel * kernel), 0);
        Self {
            weight,
            bias,
            kernel,
            stride,
            padding,
        }
    }

    /// He-normal initialized convolution.
    pub fn he_normal(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array2::from_shape_fn((kernel * kernel * c_in, c_out), |_| normal.sample(rng));
        Self::new(weight, Array1::zeros(c_out), kernel, stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn in_channels(&self) -> usize {
        self.weight.nrows() / (self.kernel * self.kernel)
    }

    /// Folds a per-output-channel affine map `y ↦ y·scale + shift` into the layer.
    fn fold_affine(&mut self, scale: &Array1<f64>, shift: &Array1<f64>) {
        for (mut col, &k) in self.weight.columns_mut().into_iter().zip(scale) {
            col *= k;
        }
        self.bias = &self.bias * scale + shift;
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let k = self.kernel;
        let out_h = (h + 2 * self.padding - k) / self.stride + 1;
        let out_w = (w + 2 * self.padding - k) / self.stride + 1;
        let rows = if k == 1 && self.padding == 0 {
            // 1x1 convolution is a plain matmul over (strided) positions.
            let sub = x.slice(s![..;self.stride, ..;self.stride, ..]).to_owned();
            sub.into_shape_with_order((out_h * out_w, c)).expect("standard layout")
        } else {
            let mut cols = Array2::zeros((out_h * out_w, k * k * c));
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut row = cols.row_mut(oy * out_w + ox);
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = (ky * k + kx) * c;
                            row.slice_mut(s![base..base + c])
                                .assign(&x.slice(s![iy as usize, ix as usize, ..]));
                        }
                    }
                }
            }
            cols
        };
        let out = rows.dot(&self.weight) + &self.bias;
        out.into_shape_with_order((out_h, out_w, self.out_channels()))
            .expect("standard layout")
    }
}

fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

const TOY_WIDTHS: [usize; 3] = [8, 16, 32];

/// Strided 3-stage convolutional network with fixed seeded weights.
///
/// Each stage is a 3×3, stride-2 convolution followed by ReLU, so a 64×64
/// image yields levels at 32×32, 16×16 and 8×8.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    stages: Vec<Conv2d>,
}

impl ToyBackbone {
    pub fn new(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let stages = widths
            .iter()
            .map(|&c_out| {
                let conv = Conv2d::he_normal(&mut rng, c_in, c_out, 3, 2, 1);
                c_in = c_out;
                conv
            })
            .collect();
        Self { stages }
    }
}

impl Backbone for ToyBackbone {
    fn name(&self) -> &str {
        TOY_BACKBONE
    }

    fn level_channels(&self) -> Vec<usize> {
        self.stages.iter().map(Conv2d::out_channels).collect()
    }

    fn forward_levels(&self, image: &Array3<f64>, levels: &[usize]) -> Vec<Array3<f64>> {
        let deepest = levels.iter().copied().max().unwrap_or(0);
        let mut outputs = Vec::with_capacity(deepest);
        let mut x = image.clone();
        for stage in &self.stages[..deepest] {
            x = stage.forward(&x);
            relu_inplace(&mut x);
            outputs.push(x.clone());
        }
        levels.iter().map(|&l| outputs[l - 1].clone()).collect()
    }
}

/// Bottleneck residual block with batch norm folded into the convolutions.
#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    downsample: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut y = self.conv1.forward(x);
        relu_inplace(&mut y);
        let mut y = self.conv2.forward(&y);
        relu_inplace(&mut y);
        let mut y = self.conv3.forward(&y);
        match &self.downsample {
            Some(ds) => y += &ds.forward(x),
            None => y += x,
        }
        relu_inplace(&mut y);
        y
    }
}

/// WideResNet-50-2 (torchvision layout) truncated after the deepest requested stage.
#[derive(Clone, Debug)]
pub struct WideResNet50 {
    stem: Conv2d,
    layers: Vec<Vec<Bottleneck>>,
}

const WRN_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const WRN_PLANES: [usize; 4] = [64, 128, 256, 512];

impl WideResNet50 {
    /// Level widths: 256, 512, 1024, 2048.
    pub fn stage_channels() -> [usize; 4] {
        WRN_PLANES.map(|p| p * 4)
    }

    fn build<F>(max_level: usize, mut conv: F) -> Result<Self>
    where
        F: FnMut(&str, usize, usize, usize, usize, usize) -> Result<Conv2d>,
    {
        let stem = conv("conv1", 3, 64, 7, 2, 3)?;
        let mut layers = Vec::new();
        let mut c_in = 64;
        for (li, (&blocks, &planes)) in WRN_BLOCKS.iter().zip(&WRN_PLANES).enumerate().take(max_level.min(4)) {
            let width = planes * 2;
            let c_out = planes * 4;
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let stride = if b == 0 && li > 0 { 2 } else { 1 };
                let prefix = format!("layer{}.{}", li + 1, b);
                let block_in = if b == 0 { c_in } else { c_out };
                let downsample = if b == 0 {
                    Some(conv(&format!("{prefix}.downsample"), block_in, c_out, 1, stride, 0)?)
                } else {
                    None
                };
                layer.push(Bottleneck {
                    conv1: conv(&format!("{prefix}.conv1"), block_in, width, 1, 1, 0)?,
                    conv2: conv(&format!("{prefix}.conv2"), width, width, 3, stride, 1)?,
                    conv3: conv(&format!("{prefix}.conv3"), width, c_out, 1, 1, 0)?,
                    downsample,
                });
            }
            c_in = c_out;
            layers.push(layer);
        }
        Ok(Self { stem, layers })
    }

    /// Randomly initialized network (He-normal, identity batch norm).
    pub fn random(seed: u64, max_level: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(max_level, |_, c_in, c_out, k, stride, pad| {
            Ok(Conv2d::he_normal(&mut rng, c_in, c_out, k, stride, pad))
        })
        .expect("random init is infallible")
    }

    /// Loads torchvision-named weights (`conv1.weight`, `bn1.running_mean`,
    /// `layer1.0.downsample.0.weight`, ...) from a safetensors file.
    pub fn load(path: &Path, max_level: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let fetch = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let view = tensors
                .tensor(name)
                .map_err(|e| Error::Checkpoint(format!("{}: tensor `{name}`: {e}", path.display())))?;
            let data = match view.dtype() {
                safetensors::Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                safetensors::Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
                other => {
                    return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported dtype {other:?}")))
                }
            };
            Ok((view.shape().to_vec(), data))
        };
        Self::build(max_level, |prefix, c_in, c_out, k, stride, pad| {
            let (conv_name, bn_name) = match prefix.strip_suffix(".downsample") {
                Some(p) => (format!("{p}.downsample.0"), format!("{p}.downsample.1")),
                None if prefix == "conv1" => ("conv1".to_string(), "bn1".to_string()),
                None => {
                    let (block, conv) = prefix.rsplit_once('.').expect("prefix has a dot");
                    (prefix.to_string(), format!("{block}.{}", conv.replace("conv", "bn")))
                }
            };
            let (shape, w) = fetch(&format!("{conv_name}.weight"))?;
            if shape != [c_out, c_in, k, k] {
                return Err(Error::Checkpoint(format!(
                    "{conv_name}.weight: expected shape {:?}, found {shape:?}",
                    [c_out, c_in, k, k]
                )));
            }
            // [c_out, c_in, ky, kx] -> row (ky*k + kx)*c_in + ci, column c_out
            let weight = Array2::from_shape_fn((k * k * c_in, c_out), |(r, o)| {
                let ci = r % c_in;
                let kk = r / c_in;
                let (ky, kx) = (kk / k, kk % k);
                w[((o * c_in + ci) * k + ky) * k + kx]
            });
            let mut conv = Conv2d::new(weight, Array1::zeros(c_out), k, stride, pad);
            let bn = |field: &str| -> Result<Array1<f64>> {
                Ok(Array1::from(fetch(&format!("{bn_name}.{field}"))?.1))
            };
            let (gamma, beta, mean, var) = (bn("weight")?, bn("bias")?, bn("running_mean")?, bn("running_var")?);
            let scale = &gamma / &var.mapv(|v| (v + 1e-5).sqrt());
            let shift = &beta - &(&mean * &scale);
            conv.fold_affine(&scale, &shift);
            Ok(conv)
        })
    }
}

fn max_pool_3x3_s2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let out_h = (h + 2 - 3) / 2 + 1;
    let out_w = (w + 2 - 3) / 2 + 1;
    Array3::from_shape_fn((out_h, out_w, c), |(oy, ox, ch)| {
        let mut m = f64::NEG_INFINITY;
        for ky in 0..3 {
            for kx in 0..3 {
                let iy = (oy * 2 + ky) as isize - 1;
                let ix = (ox * 2 + kx) as isize - 1;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    m = m.max(x[[iy as usize, ix as usize, ch]]);
                }
            }
        }
        m
    })
}

impl Backbone for WideResNet50 {
    fn name(&self) -> &str {
        WIDE_RESNET50
    }

    fn level_channels(&self) -> Vec<usize> {
        Self::stage_channels()[..self.layers.len()].to_vec()
    }

    fn forward_levels(&self, image: &Array3<f64>, levels: &[usize]) -> Vec<Array3<f64>> {
        let mut x = self.stem.forward(image);
        relu_inplace(&mut x);
        let mut x = max_pool_3x3_s2(&x);
        let deepest = levels.iter().copied().max().unwrap_or(0);
        let mut outputs = Vec::with_capacity(deepest);
        for layer in &self.layers[..deepest] {
            for block in layer {
                x = block.forward(&x);
            }
            outputs.push(x.clone());
        }
        levels.iter().map(|&l| outputs[l - 1].clone()).collect()
    }
}
