//! Synthetic registered visible/thermal scenes with head annotations, and
//! the loader for the on-disk layout
//! `root/{split}/{rgb,tir,gt}/<stem>.{png,png,json}` plus
//! `root/{split}/metadata.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::{DotAnnotations, DEFAULT_SIGMA, TRUNCATE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::{DensityLevel, DensityThresholds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Illumination {
    Light,
    DarkAndDust,
}

/// Visible-channel gain applied to dark scenes.
pub const DARK_GAIN: f64 = 0.35;
/// Default border kept free of heads so every Gaussian stays inside.
pub const DEFAULT_MARGIN: f64 = TRUNCATE * DEFAULT_SIGMA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `(H, W)`.
    pub image_size: (usize, usize),
    pub n_people: usize,
    pub illumination: Illumination,
    /// Number of crowd clusters; 0 scatters people uniformly.
    pub cluster_count: usize,
    /// Standard deviation of people around their cluster center, in pixels.
    pub spread: f64,
    pub margin: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(image_size: (usize, usize), n_people: usize, seed: u64) -> Self {
        Self {
            image_size,
            n_people,
            illumination: Illumination::Light,
            cluster_count: 2,
            spread: 6.0,
            margin: DEFAULT_MARGIN,
            seed,
        }
    }

    pub fn with_illumination(mut self, illumination: Illumination) -> Self {
        self.illumination = illumination;
        self
    }

    /// Interior rectangle `(x0, y0, x1, y1)` where heads may be placed.
    fn interior(&self) -> (f64, f64, f64, f64) {
        let (h, w) = self.image_size;
        (self.margin, self.margin, w as f64 - self.margin, h as f64 - self.margin)
    }

    /// At most one person per 4 interior pixels.
    pub fn capacity(&self) -> usize {
        let (x0, y0, x1, y1) = self.interior();
        if x1 <= x0 || y1 <= y0 {
            return 0;
        }
        ((x1 - x0) * (y1 - y0) / 4.0).floor() as usize
    }
}

/// Registered single-channel images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub visible: Tensor,
    pub thermal: Tensor,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub pair: ImagePair,
    pub annotations: DotAnnotations,
}

/// Separate random streams so illumination never perturbs geometry.
const STREAM_PEOPLE: u64 = 1;
const STREAM_VISIBLE: u64 = 2;
const STREAM_THERMAL: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn place_people(spec: &SceneSpec) -> Vec<(f64, f64)> {
    let mut rng = stream(spec.seed, STREAM_PEOPLE);
    let (x0, y0, x1, y1) = spec.interior();
    let uniform = |rng: &mut ChaCha8Rng| (rng.random_range(x0..x1), rng.random_range(y0..y1));
    let centers: Vec<(f64, f64)> = (0..spec.cluster_count).map(|_| uniform(&mut rng)).collect();
    let offset = Normal::new(0.0, spec.spread.max(1e-9)).expect("positive spread");
    (0..spec.n_people)
        .map(|_| {
            if centers.is_empty() {
                return uniform(&mut rng);
            }
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            for _ in 0..16 {
                let (x, y) = (cx + offset.sample(&mut rng), cy + offset.sample(&mut rng));
                if x >= x0 && x < x1 && y >= y0 && y < y1 {
                    return (x, y);
                }
            }
            uniform(&mut rng)
        })
        .collect()
}

fn add_blob(img: &mut [f64], h: usize, w: usize, (px, py): (f64, f64), sigma: f64, amp: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let (cx, cy) = (px.floor() as isize, py.floor() as isize);
    for y in (cy - r).max(0)..(cy + r + 1).min(h as isize) {
        for x in (cx - r).max(0)..(cx + r + 1).min(w as isize) {
            let dx = x as f64 + 0.5 - px;
            let dy = y as f64 + 0.5 - py;
            img[y as usize * w + x as usize] += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
}

fn add_rect(img: &mut [f64], h: usize, w: usize, rng: &mut ChaCha8Rng, max_w: usize, max_h: usize, delta: f64) {
    let rw = rng.random_range(1..=max_w.min(w));
    let rh = rng.random_range(1..=max_h.min(h));
    let x0 = rng.random_range(0..=w - rw);
    let y0 = rng.random_range(0..=h - rh);
    for y in y0..y0 + rh {
        for v in &mut img[y * w + x0..y * w + x0 + rw] {
            *v += delta;
        }
    }
}

fn clamp_unit(img: &mut [f64]) {
    for v in img {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Renders one scene: thermal shows bright blobs on the heads over a cool
/// background; visible shows faint blobs over road/tree-like clutter and is
/// darkened for `DarkAndDust`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let (h, w) = spec.image_size;
    if h == 0 || w == 0 {
        return Err(Error::invalid("generate_scene", "image size must be positive"));
    }
    if spec.n_people > spec.capacity() {
        return Err(Error::invalid(
            "generate_scene",
            format!(
                "{} people exceed the capacity {} of a {h}x{w} image with margin {}",
                spec.n_people,
                spec.capacity(),
                spec.margin
            ),
        ));
    }
    let people = place_people(spec);

    let mut rng = stream(spec.seed, STREAM_VISIBLE);
    let mut visible = vec![rng.random_range(0.35..0.55); h * w];
    // roads: long thin bright bands
    for _ in 0..2 {
        if rng.random_bool(0.5) {
            add_rect(&mut visible, h, w, &mut rng, w, (h / 8).max(1), 0.15);
        } else {
            add_rect(&mut visible, h, w, &mut rng, (w / 8).max(1), h, 0.15);
        }
    }
    // trees: dark compact patches
    for _ in 0..4 {
        add_rect(&mut visible, h, w, &mut rng, (w / 6).max(1), (h / 6).max(1), -0.2);
    }
    for &p in &people {
        add_blob(&mut visible, h, w, p, 1.5, 0.12);
    }
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    for v in &mut visible {
        *v += noise.sample(&mut rng);
    }
    clamp_unit(&mut visible);
    if spec.illumination == Illumination::DarkAndDust {
        for v in &mut visible {
            *v *= DARK_GAIN;
        }
    }

    let mut rng = stream(spec.seed, STREAM_THERMAL);
    let base = rng.random_range(0.15..0.25);
    let gx = rng.random_range(-0.05..0.05);
    let mut thermal: Vec<f64> = (0..h * w)
        .map(|i| base + gx * ((i % w) as f64 / w as f64))
        .collect();
    for &p in &people {
        add_blob(&mut thermal, h, w, p, 1.5, 0.7);
    }
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    for v in &mut thermal {
        *v += noise.sample(&mut rng);
    }
    clamp_unit(&mut thermal);

    Ok(Scene {
        spec: spec.clone(),
        pair: ImagePair {
            visible: Tensor::new(vec![1, h, w], visible)?,
            thermal: Tensor::new(vec![1, h, w], thermal)?,
        },
        annotations: DotAnnotations::new(people, (h, w))?,
    })
}

pub fn tensor_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (c, h, w) = t.dims3("tensor_to_gray")?;
    if c != 1 {
        return Err(Error::shape("tensor_to_gray", format!("expected one channel, got {c}")));
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = t.data()[y as usize * w + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    tensor_to_gray(t)?
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Loads a PNG as luminance in `[0, 1]`, shape `[1, H, W]`.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMetadata {
    pub illumination: Illumination,
    pub density_level: DensityLevel,
    pub n_people: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetadata {
    /// Resolved generator configuration.
    pub config: serde_json::Value,
    pub entries: BTreeMap<String, EntryMetadata>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub stem: String,
    pub visible_path: PathBuf,
    pub thermal_path: PathBuf,
    pub annotation_path: PathBuf,
    pub metadata: EntryMetadata,
}

impl DatasetEntry {
    pub fn load_pair(&self) -> Result<ImagePair> {
        let visible = load_gray(&self.visible_path)?;
        let thermal = load_gray(&self.thermal_path)?;
        if visible.shape() != thermal.shape() {
            return Err(Error::MissingCounterpart {
                stem: self.stem.clone(),
                detail: format!("visible {:?} and thermal {:?} differ in size", visible.shape(), thermal.shape()),
            });
        }
        Ok(ImagePair { visible, thermal })
    }

    pub fn load_annotations(&self, image_size: (usize, usize)) -> Result<DotAnnotations> {
        DotAnnotations::read_json(&self.annotation_path, image_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

const SUBDIRS: [(&str, &str); 3] = [("rgb", "png"), ("tir", "png"), ("gt", "json")];

fn stems(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Indexes and validates one split. Every stem must be present in all three
/// subdirectories and its annotation must parse.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    load_dataset_with(root, split, &DensityThresholds::default())
}

pub fn load_dataset_with(root: &Path, split: Split, thresholds: &DensityThresholds) -> Result<DatasetIndex> {
    let dir = root.join(split.as_str());
    let sets = SUBDIRS
        .iter()
        .map(|(sub, ext)| stems(&dir.join(sub), ext))
        .collect::<Result<Vec<_>>>()?;
    let all: BTreeSet<&String> = sets.iter().flatten().collect();
    if all.is_empty() {
        warn!("no samples found under {}", dir.display());
        return Ok(DatasetIndex { split, entries: Vec::new() });
    }
    for stem in &all {
        let missing: Vec<&str> = SUBDIRS
            .iter()
            .zip(&sets)
            .filter(|(_, set)| !set.contains(*stem))
            .map(|((sub, _), _)| *sub)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCounterpart {
                stem: stem.to_string(),
                detail: format!("no file in {}", missing.join(", ")),
            });
        }
    }

    let meta_path = dir.join("metadata.json");
    let metadata: Option<SplitMetadata> = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: meta_path.clone(),
            detail: e.to_string(),
        })?)
    } else {
        warn!("{} missing; assuming light illumination", meta_path.display());
        None
    };

    let mut entries = Vec::new();
    for stem in all {
        let annotation_path = dir.join("gt").join(format!("{stem}.json"));
        let text = fs::read_to_string(&annotation_path).map_err(|e| Error::io(&annotation_path, e))?;
        let file: crate::density::AnnotationFile =
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: annotation_path.clone(),
                detail: e.to_string(),
            })?;
        let n = file.points.len();
        let meta = match metadata.as_ref().and_then(|m| m.entries.get(stem)) {
            Some(m) => {
                if m.n_people != n || m.density_level != thresholds.level(n) {
                    return Err(Error::Malformed {
                        path: annotation_path,
                        detail: format!(
                            "{n} points disagree with metadata ({} people, {:?})",
                            m.n_people, m.density_level
                        ),
                    });
                }
                m.clone()
            }
            None => EntryMetadata {
                illumination: Illumination::Light,
                density_level: thresholds.level(n),
                n_people: n,
            },
        };
        entries.push(DatasetEntry {
            stem: stem.clone(),
            visible_path: dir.join("rgb").join(format!("{stem}.png")),
            thermal_path: dir.join("tir").join(format!("{stem}.png")),
            annotation_path,
            metadata: meta,
        });
    }
    Ok(DatasetIndex { split, entries })
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: (usize, usize),
    /// Inclusive range of people per scene.
    pub people: (usize, usize),
    pub test_fraction: f64,
    pub dark_fraction: f64,
    pub max_clusters: usize,
    pub spread: f64,
    pub margin: f64,
    pub thresholds: DensityThresholds,
}

impl GenConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            image_size: (64, 64),
            people: (1, 160),
            test_fraction: 0.25,
            dark_fraction: 0.5,
            max_clusters: 3,
            spread: 6.0,
            margin: DEFAULT_MARGIN,
            thresholds: DensityThresholds::default(),
        }
    }

    /// Number of scenes assigned to the test split (the last ones).
    pub fn test_count(&self) -> usize {
        (self.count as f64 * self.test_fraction).round() as usize
    }

    /// The per-scene specs, in order, derived from the master seed.
    pub fn scene_specs(&self) -> Result<Vec<SceneSpec>> {
        let (lo, hi) = self.people;
        if lo > hi {
            return Err(Error::invalid("gen-data", format!("people range {lo}..={hi} is empty")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.count)
            .map(|_| SceneSpec {
                image_size: self.image_size,
                n_people: rng.random_range(lo..=hi),
                illumination: if rng.random_bool(self.dark_fraction.clamp(0.0, 1.0)) {
                    Illumination::DarkAndDust
                } else {
                    Illumination::Light
                },
                cluster_count: rng.random_range(0..=self.max_clusters),
                spread: self.spread,
                margin: self.margin,
                seed: rng.random(),
            })
            .collect())
    }
}

/// Writes one scene under `root/{split}`.
pub fn write_scene(root: &Path, split: Split, stem: &str, scene: &Scene) -> Result<()> {
    let dir = root.join(split.as_str());
    for (sub, _) in SUBDIRS {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    save_png(&scene.pair.visible, &dir.join("rgb").join(format!("{stem}.png")))?;
    save_png(&scene.pair.thermal, &dir.join("tir").join(format!("{stem}.png")))?;
    scene.annotations.write_json(&dir.join("gt").join(format!("{stem}.json")))
}

/// Generates and writes a full dataset; returns `(train, test)` sizes.
pub fn generate_dataset(root: &Path, cfg: &GenConfig) -> Result<(usize, usize)> {
    let specs = cfg.scene_specs()?;
    let n_test = cfg.test_count();
    let n_train = cfg.count - n_test;
    let config = serde_json::to_value(cfg).expect("config serializes");
    let mut meta = [Split::Train, Split::Test].map(|_| SplitMetadata {
        config: config.clone(),
        entries: BTreeMap::new(),
    });
    for (i, spec) in specs.iter().enumerate() {
        let scene = generate_scene(spec)?;
        let (split, slot) = if i < n_train { (Split::Train, 0) } else { (Split::Test, 1) };
        let stem = format!("{i:05}");
        write_scene(root, split, &stem, &scene)?;
        meta[slot].entries.insert(
            stem,
            EntryMetadata {
                illumination: spec.illumination,
                density_level: cfg.thresholds.level(spec.n_people),
                n_people: spec.n_people,
            },
        );
    }
    for (split, m) in [Split::Train, Split::Test].into_iter().zip(&meta) {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("metadata.json");
        let text = serde_json::to_string_pretty(m).expect("metadata serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok((n_train, n_test))
}
