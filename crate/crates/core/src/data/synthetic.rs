//! Speckled point-scatterer targets, a stand-in for labeled radar chips.

use rand::Rng;
use rand_distr::Exp1;

use super::{Dataset, NormalizationParams, Split, DEFAULT_LOG_EPSILON};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Additive magnitude floor under the speckle.
    pub clutter_floor: f64,
    /// Maximum per-image translation of the whole layout, in pixels.
    pub jitter: i64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, image_size: usize, seed: u64) -> Self {
        SyntheticSpec { num_classes, image_size, seed, clutter_floor: 0.05, jitter: 1 }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.image_size < 4 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs classes >= 1 and size >= 4, got {} classes at {}px",
                self.num_classes, self.image_size
            )));
        }
        if !(self.clutter_floor > 0.0) {
            return Err(Error::InvalidArgument("clutter floor must be positive".into()));
        }
        Ok(())
    }

    fn blur_sigma(&self) -> f64 {
        (self.image_size as f64 / 32.0).max(0.6)
    }

    /// Scatterers `(y, x, amplitude)` defining class `class`.
    fn layout(&self, class: usize) -> Vec<(f64, f64, f64)> {
        let mut rng = stream(derive_seed(self.seed, tag("layout")), class as u64);
        let s = self.image_size as f64;
        let count = rng.random_range(3..=6);
        (0..count)
            .map(|_| {
                let y = (rng.random_range(0.2..0.8) * s).round();
                let x = (rng.random_range(0.2..0.8) * s).round();
                (y, x, rng.random_range(0.4..1.0))
            })
            .collect()
    }

    /// Log-scaled (dB) image of class `class`, drawn from the stream of `split`/`index`.
    fn render_db(&self, layout: &[(f64, f64, f64)], split: Split, index: usize) -> Vec<f32> {
        let mut rng = stream(derive_seed(self.seed, tag(&split.to_string())), index as u64);
        let dy = rng.random_range(-self.jitter..=self.jitter) as f64;
        let dx = rng.random_range(-self.jitter..=self.jitter) as f64;
        let gains: Vec<f64> = layout.iter().map(|_| rng.random_range(0.8..1.2)).collect();
        let n = self.image_size;
        let inv = 1.0 / (2.0 * self.blur_sigma().powi(2));
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let mut m = self.clutter_floor;
                for (&(sy, sx, amp), g) in layout.iter().zip(&gains) {
                    let d2 = (y as f64 - sy - dy).powi(2) + (x as f64 - sx - dx).powi(2);
                    m += amp * g * (-d2 * inv).exp();
                }
                let speckle: f64 = rng.sample(Exp1);
                out.push((20.0 * (m * speckle + DEFAULT_LOG_EPSILON).log10()) as f32);
            }
        }
        out
    }

    fn render_split(&self, per_class: usize, split: Split) -> (Vec<f32>, Vec<usize>) {
        let layouts: Vec<_> = (0..self.num_classes).map(|c| self.layout(c)).collect();
        let total = per_class * self.num_classes;
        let mut pixels = Vec::with_capacity(total * self.image_size * self.image_size);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let class = i % self.num_classes;
            pixels.extend(self.render_db(&layouts[class], split, i));
            labels.push(class);
        }
        (pixels, labels)
    }

    fn assemble(&self, mut pixels: Vec<f32>, labels: Vec<usize>, params: NormalizationParams, split: Split) -> Result<Dataset> {
        for v in &mut pixels {
            *v = params.normalize(*v as f64) as f32;
        }
        let n = self.image_size;
        let images = Tensor::from_vec(&[labels.len(), 1, n, n], pixels)?;
        let names = (0..self.num_classes).map(|c| format!("class_{c:02}")).collect();
        Dataset::new(images, Some(labels), names, params, split)
    }
}

/// `num_classes * per_class` labeled images, classes interleaved so any prefix
/// stays balanced. Bit-reproducible for a given seed.
pub fn generate_synthetic_dataset(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    generate_synthetic_splits(&SyntheticSpec::new(num_classes, image_size, seed), per_class, 0).map(|(train, _)| train)
}

/// Train and test splits sharing class layouts; the test split is normalized
/// with the parameters fitted on the training split.
pub fn generate_synthetic_splits(spec: &SyntheticSpec, train_per_class: usize, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if train_per_class == 0 {
        return Err(Error::InvalidArgument("per-class count must be positive".into()));
    }
    let (train_px, train_labels) = spec.render_split(train_per_class, Split::Train);
    let params = NormalizationParams::fit(&train_px, true, DEFAULT_LOG_EPSILON)?;
    let (test_px, test_labels) = spec.render_split(test_per_class, Split::Test);
    let train = spec.assemble(train_px, train_labels, params, Split::Train)?;
    let test = spec.assemble(test_px, test_labels, params, Split::Test)?;
    Ok((train, test))
}
