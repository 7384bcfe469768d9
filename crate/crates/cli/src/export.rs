//! 8-bit grayscale views of normalized images.

use std::path::Path;

use image::{GrayImage, Luma};

use sardiff::Tensor;

use crate::CliError;

const PAD: u32 = 2;

/// Maps [-1, 1] linearly onto 0..=255.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn gray(pixels: &[f32], size: usize) -> GrayImage {
    let s = size as u32;
    GrayImage::from_fn(s, s, |x, y| Luma([to_u8(pixels[(y * s + x) as usize])]))
}

fn save(img: &GrayImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
}

/// Writes `sample_00000.png`, ... into `dir`.
pub fn write_pngs(images: &Tensor<f32>, dir: &Path) -> Result<(), CliError> {
    let size = images.dim(2);
    for i in 0..images.dim(0) {
        save(&gray(images.item(i), size), &dir.join(format!("sample_{i:05}.png")))?;
    }
    Ok(())
}

/// Grid of thumbnails. With labels each row holds up to `cols` samples of one
/// class, in class order; otherwise the first images fill `cols`-wide rows.
pub fn montage(images: &Tensor<f32>, labels: Option<&[usize]>, cols: usize) -> GrayImage {
    const MAX_ROWS: usize = 10;
    let size = images.dim(2);
    let cols = cols.max(1);
    let rows: Vec<Vec<usize>> = match labels {
        Some(ids) => {
            let k = ids.iter().max().map_or(0, |m| m + 1);
            (0..k)
                .map(|c| ids.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).take(cols).collect::<Vec<_>>())
                .filter(|r| !r.is_empty())
                .collect()
        }
        None => (0..images.dim(0)).collect::<Vec<_>>().chunks(cols).take(MAX_ROWS).map(<[usize]>::to_vec).collect(),
    };
    let cell = size as u32 + PAD;
    let mut out = GrayImage::new(PAD + cell * cols as u32, PAD + cell * rows.len() as u32);
    for (r, row) in rows.iter().enumerate() {
        for (c, &i) in row.iter().enumerate() {
            let tile = gray(images.item(i), size);
            image::imageops::replace(&mut out, &tile, (PAD + cell * c as u32).into(), (PAD + cell * r as u32).into());
        }
    }
    out
}

pub fn write_montage(images: &Tensor<f32>, labels: Option<&[usize]>, cols: usize, path: &Path) -> Result<(), CliError> {
    save(&montage(images, labels, cols), path)
}
