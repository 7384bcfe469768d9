//! Dataset preparation: tiling, decibel scaling, normalization to [-1, 1],
//! synthetic speckled targets and on-disk datasets.

pub mod flatbin;
mod folder;
mod synthetic;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use folder::{load_image_folder, load_scene, FolderDatasets, FolderOptions};
pub use synthetic::{generate_synthetic_dataset, generate_synthetic_splits, SyntheticSpec};

pub const DEFAULT_LOG_EPSILON: f64 = 1e-6;
pub const DEFAULT_TILE: usize = 128;
/// Percentiles of the post-log training distribution mapped to -1 and +1.
pub const LOW_PERCENTILE: f64 = 0.1;
pub const HIGH_PERCENTILE: f64 = 99.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    /// Whether raw magnitudes pass through [`to_log_scale`] before the affine map.
    pub log_scale: bool,
    pub log_epsilon: f64,
    pub input_min: f64,
    pub input_max: f64,
}

impl NormalizationParams {
    pub fn new(log_scale: bool, log_epsilon: f64, input_min: f64, input_max: f64) -> Result<Self> {
        let p = NormalizationParams { log_scale, log_epsilon, input_min, input_max };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log_epsilon > 0.0) || !self.log_epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("log_epsilon must be positive, got {}", self.log_epsilon)));
        }
        if !(self.input_min.is_finite() && self.input_max.is_finite() && self.input_min < self.input_max) {
            return Err(Error::InvalidArgument(format!(
                "degenerate normalization range [{}, {}]",
                self.input_min, self.input_max
            )));
        }
        Ok(())
    }

    /// Fits the range to the low/high percentiles of already log-scaled values.
    pub fn fit(values: &[f32], log_scale: bool, log_epsilon: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dataset("cannot fit normalization to an empty set".into()));
        }
        let (lo, hi) = percentile_pair(values, LOW_PERCENTILE, HIGH_PERCENTILE);
        let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        Self::new(log_scale, log_epsilon, lo, hi)
    }

    pub fn normalize(&self, v: f64) -> f64 {
        let y = 2.0 * (v - self.input_min) / (self.input_max - self.input_min) - 1.0;
        y.clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        (y + 1.0) * 0.5 * (self.input_max - self.input_min) + self.input_min
    }

    /// Raw magnitude to a normalized pixel.
    pub fn encode(&self, raw: f64) -> f64 {
        let v = if self.log_scale { 20.0 * (raw + self.log_epsilon).log10() } else { raw };
        self.normalize(v)
    }

    pub fn to_text(&self) -> String {
        format!(
            "log_scale={}\nlog_epsilon={:?}\ninput_min={:?}\ninput_max={:?}\n",
            self.log_scale, self.log_epsilon, self.input_min, self.input_max
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e: Error| Error::format(path, e.to_string()))
    }
}

impl FromStr for NormalizationParams {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut log_scale = None;
        let mut eps = None;
        let mut lo = None;
        let mut hi = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let real = || value.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number for {key}: {value}")));
            match key {
                "log_scale" => {
                    log_scale = Some(value.parse::<bool>().map_err(|_| Error::InvalidArgument(format!("bad flag {value}")))?)
                }
                "log_epsilon" => eps = Some(real()?),
                "input_min" => lo = Some(real()?),
                "input_max" => hi = Some(real()?),
                _ => return Err(Error::InvalidArgument(format!("unknown key `{key}`"))),
            }
        }
        let missing = |k: &str| Error::InvalidArgument(format!("missing key `{k}`"));
        Self::new(
            log_scale.unwrap_or(true),
            eps.ok_or_else(|| missing("log_epsilon"))?,
            lo.ok_or_else(|| missing("input_min"))?,
            hi.ok_or_else(|| missing("input_max"))?,
        )
    }
}

/// Linear-interpolated percentiles `p_lo`, `p_hi` (in percent), in one pass of selection.
pub fn percentile_pair(values: &[f32], p_lo: f64, p_hi: f64) -> (f64, f64) {
    let mut buf = values.to_vec();
    (percentile_in_place(&mut buf, p_lo), percentile_in_place(&mut buf, p_hi))
}

fn percentile_in_place(buf: &mut [f32], p: f64) -> f64 {
    let n = buf.len();
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    let (_, a, rest) = buf.select_nth_unstable_by(i, f32::total_cmp);
    let a = *a as f64;
    if frac == 0.0 || rest.is_empty() {
        return a;
    }
    let b = rest.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    a + frac * (b - a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingSpec {
    pub tile: usize,
}

impl Default for TilingSpec {
    fn default() -> Self {
        TilingSpec { tile: DEFAULT_TILE }
    }
}

/// Cuts a `[H, W]` scene into non-overlapping `tile x tile` patches in
/// row-major order. Remainder rows and columns are discarded.
pub fn tile_scene(scene: &Tensor<f32>, spec: TilingSpec) -> Result<Vec<Tensor<f32>>> {
    let s = spec.tile;
    if s == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let [h, w] = scene.shape() else {
        return Err(Error::Shape(format!("scene must be [H, W], got {:?}", scene.shape())));
    };
    let (h, w) = (*h, *w);
    if h < s || w < s {
        return Err(Error::InvalidArgument(format!("scene {h}x{w} is smaller than tile {s}x{s}")));
    }
    let mut tiles = Vec::with_capacity((h / s) * (w / s));
    for ty in 0..h / s {
        for tx in 0..w / s {
            let mut data = Vec::with_capacity(s * s);
            for y in ty * s..(ty + 1) * s {
                data.extend_from_slice(&scene.data()[y * w + tx * s..y * w + (tx + 1) * s]);
            }
            tiles.push(Tensor::from_vec(&[s, s], data)?);
        }
    }
    Ok(tiles)
}

/// Elementwise `20 log10(raw + eps)`.
pub fn to_log_scale(raw: &Tensor<f32>, eps: f64) -> Result<Tensor<f32>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("log epsilon must be positive, got {eps}")));
    }
    if let Some(v) = raw.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("log scaling needs nonnegative magnitudes, found {v}")));
    }
    Ok(raw.map(|v| (20.0 * (v as f64 + eps).log10()) as f32))
}

pub fn normalize(values: &Tensor<f32>, params: &NormalizationParams) -> Result<Tensor<f32>> {
    params.validate()?;
    Ok(values.map(|v| params.normalize(v as f64) as f32))
}

pub fn denormalize(values: &Tensor<f32>, params: &NormalizationParams) -> Result<Tensor<f32>> {
    params.validate()?;
    Ok(values.map(|v| params.denormalize(v as f64) as f32))
}

/// Normalized single-channel images with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 1, S, S]`, every pixel in [-1, 1].
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub norm_params: NormalizationParams,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    split: Split,
    count: usize,
    image_size: usize,
    num_classes: usize,
    class_names: Vec<String>,
}

pub const IMAGES_FILE: &str = "images.fbt";
pub const LABELS_FILE: &str = "labels.fbt";
pub const NORM_FILE: &str = "norm_params.txt";
pub const MANIFEST_FILE: &str = "dataset.json";

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Option<Vec<usize>>,
        class_names: Vec<String>,
        norm_params: NormalizationParams,
        split: Split,
    ) -> Result<Self> {
        let ds = Dataset { images, labels, num_classes: class_names.len(), class_names, norm_params, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c, h, w) = self.images.dims4()?;
        if c != 1 || h != w {
            return Err(Error::Dataset(format!("images must be [N, 1, S, S], got {:?}", self.images.shape())));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Dataset(format!("pixel {v} outside [-1, 1]")));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Dataset("class name count differs from num_classes".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Dataset(format!("{} labels for {n} images", labels.len())));
            }
            if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::InvalidClass { id: l, num_classes: self.num_classes });
            }
        }
        self.norm_params.validate()
    }

    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.images.dim(2)
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Option<Vec<usize>>) {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        (self.images.select(indices), labels)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        flatbin::write_f32(&dir.join(IMAGES_FILE), &self.images)?;
        if let Some(labels) = &self.labels {
            flatbin::write_labels(&dir.join(LABELS_FILE), labels)?;
        }
        self.norm_params.save(&dir.join(NORM_FILE))?;
        let manifest = Manifest {
            split: self.split,
            count: self.len(),
            image_size: self.image_size(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let images = flatbin::read_f32(&dir.join(IMAGES_FILE))?;
        let labels_path = dir.join(LABELS_FILE);
        let labels = if labels_path.exists() { Some(flatbin::read_labels(&labels_path)?) } else { None };
        let norm_params = NormalizationParams::load(&dir.join(NORM_FILE))?;
        let ds = Dataset::new(images, labels, manifest.class_names, norm_params, manifest.split)?;
        if ds.len() != manifest.count || (ds.len() > 0 && ds.image_size() != manifest.image_size) {
            return Err(Error::format(&manifest_path, "manifest disagrees with stored images"));
        }
        Ok(ds)
    }
}

/// Stacks `[S, S]` magnitude tiles into a normalized, unlabeled dataset.
/// Normalization is fitted to the tiles themselves.
pub fn dataset_from_tiles(tiles: &[Tensor<f32>], log_scale: bool, log_epsilon: f64) -> Result<Dataset> {
    let first = tiles.first().ok_or_else(|| Error::Dataset("no tiles to assemble".into()))?;
    let s = first.dim(0);
    let mut data = Vec::with_capacity(tiles.len() * s * s);
    for t in tiles {
        let v = if log_scale { to_log_scale(t, log_epsilon)? } else { t.clone() };
        data.extend_from_slice(v.data());
    }
    let params = NormalizationParams::fit(&data, log_scale, log_epsilon)?;
    for v in &mut data {
        *v = params.normalize(*v as f64) as f32;
    }
    let images = Tensor::from_vec(&[tiles.len(), 1, s, s], data)?;
    Dataset::new(images, None, Vec::new(), params, Split::Train)
}
