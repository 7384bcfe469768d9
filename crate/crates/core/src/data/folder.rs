//! Directory-per-class ingestion of grayscale images or flat-binary tensors.

use std::fs;
use std::path::{Path, PathBuf};

use super::{flatbin, to_log_scale, Dataset, NormalizationParams, Split, DEFAULT_LOG_EPSILON};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "tif", "tiff"];
const FLAT_EXTENSION: &str = "fbt";

#[derive(Clone, Debug, PartialEq)]
pub struct FolderOptions {
    /// Convert magnitudes to decibels before normalizing. Disable for data
    /// that is already log-scaled.
    pub log_scale: bool,
    pub log_epsilon: f64,
}

impl Default for FolderOptions {
    fn default() -> Self {
        FolderOptions { log_scale: true, log_epsilon: DEFAULT_LOG_EPSILON }
    }
}

#[derive(Clone, Debug)]
pub struct FolderDatasets {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

/// Loads a single `[H, W]` magnitude image. 8/16-bit images map to [0, 1].
pub fn load_scene(path: &Path) -> Result<Tensor<f32>> {
    let ext = extension(path);
    if ext == FLAT_EXTENSION {
        let t = flatbin::read_f32(path)?;
        return match *t.shape() {
            [h, w] | [1, h, w] => t.reshape(&[h, w]),
            _ => Err(Error::format(path, format!("expected a [H, W] tensor, found {:?}", t.shape()))),
        };
    }
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma32f();
    let (w, h) = gray.dimensions();
    Tensor::from_vec(&[h as usize, w as usize], gray.into_raw())
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn is_sample_file(path: &Path) -> bool {
    let ext = extension(path);
    path.is_file() && (ext == FLAT_EXTENSION || IMAGE_EXTENSIONS.contains(&ext.as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Class name and files for every class directory under `root`.
fn scan(root: &Path) -> Result<Vec<(String, Vec<PathBuf>)>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut classes = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<_> = sorted_entries(&dir)?.into_iter().filter(|p| is_sample_file(p)).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory `{name}` contains no images")));
        }
        classes.push((name, files));
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    Ok(classes)
}

/// Reads every file as (possibly log-scaled) values; returns pixels, labels and image side.
fn read_split(
    classes: &[(String, Vec<PathBuf>)],
    names: &[String],
    options: &FolderOptions,
    size: &mut Option<usize>,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (name, files) in classes {
        let label = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Dataset(format!("class `{name}` does not exist in the training split")))?;
        for file in files {
            let img = load_scene(file)?;
            let (h, w) = (img.dim(0), img.dim(1));
            if h != w || size.is_some_and(|s| s != h) {
                let want = size.unwrap_or(h);
                return Err(Error::Dataset(format!(
                    "inconsistent image sizes: {} is {h}x{w}, expected {want}x{want}",
                    file.display()
                )));
            }
            *size = Some(h);
            let img = if options.log_scale { to_log_scale(&img, options.log_epsilon)? } else { img };
            pixels.extend_from_slice(img.data());
            labels.push(label);
        }
    }
    Ok((pixels, labels))
}

fn build(pixels: Vec<f32>, labels: Vec<usize>, size: usize, names: &[String], params: NormalizationParams, split: Split) -> Result<Dataset> {
    let data = pixels.into_iter().map(|v| params.normalize(v as f64) as f32).collect();
    let images = Tensor::from_vec(&[labels.len(), 1, size, size], data)?;
    Dataset::new(images, Some(labels), names.to_vec(), params, split)
}

/// Loads `root/<class>/<files>`, or `root/train/<class>/...` plus an optional
/// `root/test/<class>/...`. Normalization is fitted on the training split and
/// reused for the test split.
pub fn load_image_folder(root: &Path, options: &FolderOptions) -> Result<FolderDatasets> {
    let (train_root, test_root) = if root.join("train").is_dir() {
        let test = root.join("test");
        (root.join("train"), test.is_dir().then_some(test))
    } else {
        (root.to_path_buf(), None)
    };
    let train_classes = scan(&train_root)?;
    let names: Vec<String> = train_classes.iter().map(|(n, _)| n.clone()).collect();
    let mut size = None;
    let (train_px, train_labels) = read_split(&train_classes, &names, options, &mut size)?;
    let size = size.expect("at least one image was read");
    let params = NormalizationParams::fit(&train_px, options.log_scale, options.log_epsilon)?;
    let train = build(train_px, train_labels, size, &names, params, Split::Train)?;
    let test = match test_root {
        Some(dir) => {
            let mut test_size = Some(size);
            let (px, labels) = read_split(&scan(&dir)?, &names, options, &mut test_size)?;
            Some(build(px, labels, size, &names, params, Split::Test)?)
        }
        None => None,
    };
    Ok(FolderDatasets { train, test })
}
