//! Dataset indexing and the procedural toy dataset.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageTensor;
use crate::config::Layout;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub split: Split,
    pub anomalous: bool,
    /// Defect type directory (`good` for normals).
    pub defect: String,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub records: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn train(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Image files directly inside `dir`, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn dir_name(path: &Path) -> String {
    path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

/// Indexes a dataset. With `pixel_eval`, every anomalous test image must have a mask.
pub fn load_dataset(root: &Path, layout: Layout, category: &str, pixel_eval: bool) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
    }
    let mut records = Vec::new();
    match layout {
        Layout::Mvtec => {
            let base = root.join(category);
            let train_dir = base.join("train");
            for dir in subdirs(&train_dir)? {
                let defect = dir_name(&dir);
                if defect != "good" {
                    return Err(Error::Dataset(format!(
                        "training split may only contain normal images, found {}",
                        dir.display()
                    )));
                }
                for path in list_images(&dir)? {
                    records.push(SampleRecord {
                        path,
                        split: Split::Train,
                        anomalous: false,
                        defect: defect.clone(),
                        mask: None,
                    });
                }
            }
            for dir in subdirs(&base.join("test"))? {
                let defect = dir_name(&dir);
                let anomalous = defect != "good";
                for path in list_images(&dir)? {
                    let mask = anomalous
                        .then(|| base.join("ground_truth").join(&defect).join(format!("{}_mask.png", file_stem(&path))));
                    records.push(SampleRecord {
                        path,
                        split: Split::Test,
                        anomalous,
                        defect: defect.clone(),
                        mask,
                    });
                }
            }
        }
        Layout::Flat => {
            for path in list_images(&root.join("train"))? {
                records.push(SampleRecord {
                    path,
                    split: Split::Train,
                    anomalous: false,
                    defect: "good".into(),
                    mask: None,
                });
            }
            for (sub, anomalous) in [("normal", false), ("anomalous", true)] {
                let dir = root.join("test").join(sub);
                if !dir.is_dir() {
                    continue;
                }
                for path in list_images(&dir)? {
                    let mask = anomalous.then(|| root.join("masks").join(format!("{}.png", file_stem(&path))));
                    records.push(SampleRecord {
                        path,
                        split: Split::Test,
                        anomalous,
                        defect: if anomalous { "anomalous" } else { "good" }.into(),
                        mask,
                    });
                }
            }
        }
    }
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        category: category.to_string(),
        records,
    };
    if index.train().next().is_none() {
        return Err(Error::EmptySplit("train".into()));
    }
    if index.test().next().is_none() {
        return Err(Error::EmptySplit("test".into()));
    }
    if pixel_eval {
        for r in index.test() {
            if let Some(m) = &r.mask {
                if !m.is_file() {
                    return Err(Error::MissingMask(r.path.clone()));
                }
            }
        }
    } else {
        for r in index.records.iter_mut().filter(|r| r.mask.as_ref().is_some_and(|m| !m.is_file())) {
            r.mask = None;
        }
    }
    Ok(index)
}

/// Binary ground-truth mask resized to `side × side` (nearest neighbour).
pub fn load_mask(path: &Path, side: usize) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let gray = img.to_luma8();
    let gray = if gray.dimensions() != (side as u32, side as u32) {
        image::imageops::resize(&gray, side as u32, side as u32, image::imageops::FilterType::Nearest)
    } else {
        gray
    };
    Ok(Array2::from_shape_fn((side, side), |(y, x)| {
        if gray.get_pixel(x as u32, y as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Toy categories understood by [`generate_toy_dataset`].
pub const TOY_CATEGORIES: [&str; 2] = ["stripes", "checker"];

/// Sizes of a generated toy dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub category: String,
    pub image_size: usize,
    pub n_train: usize,
    /// Half normal, half anomalous (anomalous gets the odd one).
    pub n_test: usize,
    /// Procedural anomaly-source textures written next to the category.
    pub n_sources: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(category: &str, n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            category: category.into(),
            image_size: 64,
            n_train,
            n_test,
            n_sources: 32,
            seed,
        }
    }
}

/// Directory holding the generated anomaly-source textures.
pub fn toy_source_dir(root: &Path) -> PathBuf {
    root.join("anomaly_source")
}

fn normal_texture(category: &str, side: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let (py, px) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let base = [0.55, 0.45, 0.35];
    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let (fy, fx) = (y as f64, x as f64);
        let v = match category {
            "checker" => {
                let cell = 8.0;
                let a = ((fy / cell + py).floor() + (fx / cell + px).floor()) as i64;
                if a.rem_euclid(2) == 0 {
                    0.3
                } else {
                    -0.3
                }
            }
            _ => 0.3 * (std::f64::consts::TAU * ((fx * 0.8 + fy * 0.6) / 8.0 + py)).sin(),
        };
        (base[c] + v * 0.8 + noise.sample(rng)).clamp(0.0, 1.0)
    })
}

/// Random procedural texture: value noise, stripes, dots or flat colour.
fn random_texture(side: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let alt: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let kind = rng.random_range(0..4);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(3.0..12.0);
    let cells = rng.random_range(2..10);
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let (fy, fx) = (y as f64, x as f64);
        let t = match kind {
            0 => {
                // Bilinear value noise.
                let s = cells as f64 / side as f64;
                let (gy, gx) = (fy * s, fx * s);
                let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
                let (ty, tx) = (gy - iy as f64, gx - ix as f64);
                let at = |a: usize, b: usize| lattice[a.min(cells) * (cells + 1) + b.min(cells)];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                top * (1.0 - ty) + bot * ty
            }
            1 => 0.5 + 0.5 * (std::f64::consts::TAU * (fx * angle.cos() + fy * angle.sin()) / period).sin(),
            2 => {
                let (cy, cx) = ((fy / period).fract() - 0.5, (fx / period).fract() - 0.5);
                if cy * cy + cx * cx < 0.12 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        (color[c] * (1.0 - t) + alt[c] * t + noise.sample(rng)).clamp(0.0, 1.0)
    })
}

/// `n` in-memory anomaly-source textures, for runs without a source directory.
pub fn procedural_sources(n: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ImageTensor::new(random_texture(side, &mut rng)).expect("three channels"))
        .collect()
}

fn to_rgb(img: &Array3<f64>) -> RgbImage {
    ImageTensor::new(img.clone()).expect("three channels").to_rgb8()
}

fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Pastes 1 or 2 contrasting patches (rectangles or ellipses) and returns the
/// exact mask of changed-by-construction pixels.
fn paste_defects(img: &mut Array3<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let side = img.dim().0;
    let mut mask = Array2::zeros((side, side));
    let n = rng.random_range(1..=2);
    for _ in 0..n {
        let texture = random_texture(side, rng);
        let h = rng.random_range(side / 8..=side / 4);
        let w = rng.random_range(side / 8..=side / 4);
        let y0 = rng.random_range(0..=side - h);
        let x0 = rng.random_range(0..=side - w);
        let ellipse = rng.random_bool(0.5);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if ellipse {
                    let dy = (y as f64 + 0.5 - y0 as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
                    let dx = (x as f64 + 0.5 - x0 as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
                    if dy * dy + dx * dx > 1.0 {
                        continue;
                    }
                }
                mask[[y, x]] = 1.0;
                for c in 0..3 {
                    img[[y, x, c]] = texture[[y, x, c]];
                }
            }
        }
    }
    mask
}

/// Writes a toy dataset in the MVTec layout under `out_dir/<category>` plus
/// anomaly-source textures under `out_dir/anomaly_source`, then indexes it.
pub fn generate_toy_dataset(out_dir: &Path, spec: &ToySpec) -> Result<DatasetIndex> {
    if !TOY_CATEGORIES.contains(&spec.category.as_str()) {
        return Err(Error::Dataset(format!(
            "unknown toy category `{}` (available: {})",
            spec.category,
            TOY_CATEGORIES.join(", ")
        )));
    }
    if spec.n_train == 0 || spec.n_test < 2 || spec.image_size < 8 {
        return Err(Error::InvalidParameter("toy dataset needs training images and both test classes".into()));
    }
    let side = spec.image_size;
    let base = out_dir.join(&spec.category);
    let train_dir = base.join("train/good");
    let good_dir = base.join("test/good");
    let bad_dir = base.join("test/patch");
    let gt_dir = base.join("ground_truth/patch");
    let src_dir = toy_source_dir(out_dir);
    for d in [&train_dir, &good_dir, &bad_dir, &gt_dir, &src_dir] {
        create_dir(d)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in 0..spec.n_train {
        save_rgb(&to_rgb(&normal_texture(&spec.category, side, &mut rng)), &train_dir.join(format!("{i:03}.png")))?;
    }
    let n_bad = spec.n_test.div_ceil(2);
    for i in 0..spec.n_test - n_bad {
        save_rgb(&to_rgb(&normal_texture(&spec.category, side, &mut rng)), &good_dir.join(format!("{i:03}.png")))?;
    }
    for i in 0..n_bad {
        let mut img = normal_texture(&spec.category, side, &mut rng);
        let mask = paste_defects(&mut img, &mut rng);
        save_rgb(&to_rgb(&img), &bad_dir.join(format!("{i:03}.png")))?;
        let gray = GrayImage::from_fn(side as u32, side as u32, |x, y| {
            Luma([if mask[[y as usize, x as usize]] > 0.0 { 255 } else { 0 }])
        });
        let path = gt_dir.join(format!("{i:03}_mask.png"));
        gray.save(&path).map_err(|e| Error::Image { path, source: e })?;
    }
    for i in 0..spec.n_sources {
        save_rgb(&to_rgb(&random_texture(side, &mut rng)), &src_dir.join(format!("{i:03}.png")))?;
    }
    load_dataset(out_dir, Layout::Mvtec, &spec.category, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{auroc, Granularity, ScoredSet};

    fn small(seed: u64) -> ToySpec {
        ToySpec {
            n_sources: 4,
            ..ToySpec::new("stripes", 6, 8, seed)
        }
    }

    #[test]
    fn generated_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_toy_dataset(dir.path(), &small(1)).unwrap();
        assert_eq!(index.train().count(), 6);
        assert!(index.train().all(|r| !r.anomalous));
        assert_eq!(index.test().filter(|r| r.anomalous).count(), 4);
        assert_eq!(index.test().filter(|r| !r.anomalous).count(), 4);
        let again = load_dataset(dir.path(), Layout::Mvtec, "stripes", true).unwrap();
        assert_eq!(again, index);
        assert_eq!(list_images(&toy_source_dir(dir.path())).unwrap().len(), 4);
    }

    #[test]
    fn masks_cover_exactly_the_pasted_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_toy_dataset(dir.path(), &small(2)).unwrap();
        // Regenerate the same stream in memory and compare pixelwise.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..6 + 4 {
            normal_texture("stripes", 64, &mut rng);
        }
        for r in index.test().filter(|r| r.anomalous) {
            let mut img = normal_texture("stripes", 64, &mut rng);
            let clean = img.clone();
            let mask = paste_defects(&mut img, &mut rng);
            assert_eq!(load_mask(r.mask.as_ref().unwrap(), 64).unwrap(), mask);
            for ((y, x), &m) in mask.indexed_iter() {
                if m == 0.0 {
                    for c in 0..3 {
                        assert_eq!(img[[y, x, c]], clean[[y, x, c]]);
                    }
                }
            }
            assert!(mask.iter().any(|&m| m == 1.0));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ia = generate_toy_dataset(a.path(), &small(3)).unwrap();
        let ib = generate_toy_dataset(b.path(), &small(3)).unwrap();
        for (ra, rb) in ia.records.iter().zip(&ib.records) {
            assert_eq!(fs::read(&ra.path).unwrap(), fs::read(&rb.path).unwrap());
        }
    }

    #[test]
    fn missing_mask_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let index = generate_toy_dataset(dir.path(), &small(4)).unwrap();
        let victim = index.test().find(|r| r.anomalous).unwrap();
        fs::remove_file(victim.mask.as_ref().unwrap()).unwrap();
        match load_dataset(dir.path(), Layout::Mvtec, "stripes", true) {
            Err(Error::MissingMask(p)) => assert_eq!(p, victim.path),
            other => panic!("expected missing mask error, got {other:?}"),
        }
        let relaxed = load_dataset(dir.path(), Layout::Mvtec, "stripes", false).unwrap();
        assert!(relaxed.test().any(|r| r.anomalous && r.mask.is_none()));
    }

    #[test]
    fn anomalous_training_images_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_dataset(dir.path(), &small(5)).unwrap();
        create_dir(&dir.path().join("stripes/train/crack")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Layout::Mvtec, "stripes", true),
            Err(Error::Dataset(_))
        ));
        assert!(load_dataset(&dir.path().join("nope"), Layout::Mvtec, "stripes", true).is_err());
    }

    #[test]
    fn mean_image_detector_beats_chance() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec::new("stripes", 20, 20, 6);
        let index = generate_toy_dataset(dir.path(), &spec).unwrap();
        let load = |p: &Path| ImageTensor::load(p, 64).unwrap().into_pixels();
        let train: Vec<_> = index.train().map(|r| load(&r.path)).collect();
        let mean = train.iter().fold(Array3::<f64>::zeros((64, 64, 3)), |a, b| a + b) / train.len() as f64;
        let mut set = ScoredSet::empty(Granularity::Image);
        for r in index.test() {
            let score = (load(&r.path) - &mean).mapv(f64::abs).mean().unwrap();
            set.push(score, r.anomalous).unwrap();
        }
        assert!(auroc(&set).unwrap() > 0.5);
    }

    #[test]
    fn flat_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for d in ["train", "test/normal", "test/anomalous", "masks"] {
            create_dir(&root.join(d)).unwrap();
        }
        let img = RgbImage::new(8, 8);
        for p in ["train/b.png", "train/a.png", "test/normal/n.png", "test/anomalous/x.png"] {
            img.save(root.join(p)).unwrap();
        }
        GrayImage::new(8, 8).save(root.join("masks/x.png")).unwrap();
        let index = load_dataset(root, Layout::Flat, "any", true).unwrap();
        let names: Vec<_> = index.train().map(|r| file_stem(&r.path)).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(index.test().filter(|r| r.anomalous).count(), 1);
    }
}
