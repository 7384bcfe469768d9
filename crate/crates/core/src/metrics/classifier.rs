//! Small convolutional classifier used as the feature extractor.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, FeatureSet};
use crate::autograd::{softmax_rows, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, tag};
use crate::tensor::Tensor;
use crate::train::Adam;
use crate::unet::Param;

pub const CHECKPOINT_KIND: &str = "classifier";
/// Feature maps are downsampled until their side is at most this.
const FINAL_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Width of the first convolution; doubled at every downsampling.
    pub width: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            image_size: 128,
            num_classes: 10,
            width: 8,
            feature_dim: 256,
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    fn downsamples(&self) -> usize {
        let mut side = self.image_size;
        let mut n = 0;
        while side > FINAL_SIDE && side % 2 == 0 {
            side /= 2;
            n += 1;
        }
        n.max(1)
    }

    fn final_side(&self) -> usize {
        self.image_size >> self.downsamples()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || self.image_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!("classifier needs an even image size, got {}", self.image_size)));
        }
        if self.num_classes < 2 || self.width == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument("classifier needs >= 2 classes and positive widths".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("classifier epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FeatureClassifier {
    config: ClassifierConfig,
    params: Vec<Param<f32>>,
}

impl FeatureClassifier {
    pub fn build(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(derive_seed(config.seed, tag("classifier_init")), 0);
        let mut params = Vec::new();
        let mut push = |name: String, shape: &[usize], fan_in: usize| {
            let std = if fan_in == 0 { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
            let t = rng::normal_tensor::<f32, _>(shape, &mut rng).map(|v| v * std as f32);
            params.push(Param { name, value: Arc::new(t) });
        };
        let mut c = 1;
        let mut out = config.width;
        for i in 0..=config.downsamples() {
            push(format!("conv{i}.weight"), &[out, c, 3, 3], 9 * c);
            push(format!("conv{i}.bias"), &[out], 0);
            c = out;
            out *= 2;
        }
        let flat = c * config.final_side().pow(2);
        push("fc1.weight".into(), &[config.feature_dim, flat], flat);
        push("fc1.bias".into(), &[config.feature_dim], 0);
        push("fc2.weight".into(), &[config.num_classes, config.feature_dim], config.feature_dim);
        push("fc2.bias".into(), &[config.num_classes], 0);
        Ok(FeatureClassifier { config: config.clone(), params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Features after the penultimate layer and logits.
    fn forward(&self, tape: &Tape<f32>, x: &Var<f32>) -> (Var<f32>, Var<f32>, Vec<Var<f32>>) {
        let p: Vec<Var<f32>> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let convs = self.config.downsamples() + 1;
        let mut h = x.clone();
        for i in 0..convs {
            let stride = if i == 0 { 1 } else { 2 };
            h = tape.relu(&tape.conv2d(&h, &p[2 * i], &p[2 * i + 1], stride, 1));
        }
        let n = h.shape()[0];
        let flat = h.value().len() / n.max(1);
        let h = tape.reshape(&h, &[n, flat]);
        let k = 2 * convs;
        let features = tape.relu(&tape.linear(&h, &p[k], &p[k + 1]));
        let logits = tape.linear(&features, &p[k + 2], &p[k + 3]);
        (features, logits, p)
    }

    fn check_images(&self, images: &Tensor<f32>) -> Result<usize> {
        let (n, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if (c, h, w) != (1, s, s) {
            return Err(Error::Shape(format!("classifier expects [N, 1, {s}, {s}], got {:?}", images.shape())));
        }
        Ok(n)
    }

    /// Trains on `train`, reporting accuracy on `test` when given.
    pub fn train(train: &Dataset, test: Option<&Dataset>, config: &ClassifierConfig) -> Result<(Self, ClassifierReport)> {
        let labels = train.labels.as_ref().ok_or_else(|| Error::Dataset("feature extractor needs a labeled dataset".into()))?;
        if train.image_size() != config.image_size || train.num_classes != config.num_classes {
            return Err(Error::ConfigConflict(format!(
                "dataset is {}px with {} classes, classifier configured for {}px with {}",
                train.image_size(),
                train.num_classes,
                config.image_size,
                config.num_classes
            )));
        }
        let mut model = Self::build(config)?;
        let mut adam = Adam::new(&model.params, config.learning_rate);
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::stream(derive_seed(config.seed, tag("classifier_shuffle")), epoch as u64));
            let mut total = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let tape = Tape::new();
                let x = tape.constant(train.images.select(chunk));
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let (_, logits, vars) = model.forward(&tape, &x);
                let loss = tape.cross_entropy(&logits, &y);
                let value = loss.value().data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("classifier loss {value} in epoch {}", epoch + 1)));
                }
                total += value * chunk.len() as f64;
                let mut grads = tape.backward(&loss);
                let g: Vec<Tensor<f32>> =
                    vars.iter().map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();
                adam.update(&mut model.params, &g, 0.0)?;
            }
            let mean = total / train.len() as f64;
            log::info!("classifier epoch {}/{}: loss {mean:.4}", epoch + 1, config.epochs);
            epoch_losses.push(mean);
        }
        let report = ClassifierReport {
            epoch_losses,
            train_accuracy: model.accuracy(train)?,
            test_accuracy: test.map(|t| model.accuracy(t)).transpose()?,
        };
        Ok((model, report))
    }

    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let fs = self.extract(images)?;
        let k = self.config.num_classes;
        Ok(fs.probs.data().chunks(k).map(|row| argmax(row)).collect())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let labels = data.labels.as_ref().ok_or_else(|| Error::Dataset("accuracy needs labels".into()))?;
        let pred = self.predict(&data.images)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(&self.config).expect("config serializes");
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, meta);
        for p in &self.params {
            ck.push(p.name.clone(), (*p.value).clone());
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::format(path, format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", ck.kind)));
        }
        let config: ClassifierConfig =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format(path, format!("bad config: {e}")))?;
        let mut model = Self::build(&config)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::format(path, "tensor count disagrees with the classifier architecture"));
        }
        for p in &mut model.params {
            let t = ck.get(&p.name).ok_or_else(|| Error::format(path, format!("missing `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(path, format!("shape mismatch for `{}`", p.name)));
            }
            p.value = Arc::new(t.clone());
        }
        Ok(model)
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

impl FeatureExtractor for FeatureClassifier {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn extract(&self, images: &Tensor<f32>) -> Result<FeatureSet> {
        let n = self.check_images(images)?;
        let (d, k) = (self.config.feature_dim, self.config.num_classes);
        let mut features = Vec::with_capacity(n * d);
        let mut logits = Vec::with_capacity(n * k);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(128) {
            let tape = Tape::inference();
            let x = tape.constant(images.select(chunk));
            let (f, l, _) = self.forward(&tape, &x);
            features.extend(f.value().data().iter().map(|&v| v as f64));
            logits.extend(l.value().data().iter().map(|&v| v as f64));
        }
        Ok(FeatureSet {
            features: Tensor::from_vec(&[n, d], features)?,
            probs: Tensor::from_vec(&[n, k], softmax_rows(&logits, k))?,
        })
    }
}
