//! Noise-prediction training: loss, Adam, epoch loop, checkpoints and the
//! unconditional-pretrain / conditional-finetune workflow.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{Dataset, NormalizationParams};
use crate::diffusion::{forward_sample, NoisePredictor};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, tag, StreamRng};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::{Element, Tensor};
use crate::unet::{DenoiserModel, Param, UNet, UNetConfig};

pub const LOSS_CSV: &str = "losses.csv";
pub const CONFIG_SNAPSHOT: &str = "train_config.json";
const OPTIMIZER_KIND: &str = "adam";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub conditional: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 2e-4,
            pretrain_epochs: 500,
            seed: 0,
            schedule: ScheduleConfig::default(),
            conditional: true,
            grad_clip: 1.0,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidArgument("grad_clip must be >= 0".into()));
        }
        self.schedule.build().map(|_| ())
    }
}

/// Timesteps and noise for one batch.
#[derive(Clone, Debug)]
pub struct NoiseDraw<F> {
    pub t: Vec<usize>,
    pub eps: Tensor<F>,
}

impl<F: Element> NoiseDraw<F> {
    /// `t` uniform on `1..=T` per element, `eps ~ N(0, I)`.
    pub fn sample(shape: &[usize], steps: usize, rng: &mut StreamRng) -> Self {
        let t = (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect();
        NoiseDraw { t, eps: rng::normal_tensor(shape, rng) }
    }
}

pub struct LossOutput<F> {
    pub loss: f64,
    /// One gradient per model parameter, in parameter order.
    pub grads: Vec<Tensor<F>>,
}

fn check_loss(loss: f64, draw_t: &[usize]) -> Result<f64> {
    if loss.is_finite() {
        return Ok(loss);
    }
    let (lo, hi) = draw_t.iter().fold((usize::MAX, 0), |(a, b), &t| (a.min(t), b.max(t)));
    Err(Error::NonFinite(format!(
        "loss {loss} on a batch of {} (timesteps {lo}..={hi})",
        draw_t.len()
    )))
}

/// `mean((eps - eps_hat(x_t, t))^2)` for any predictor, without gradients.
pub fn predictor_loss<F: Element, M: NoisePredictor<F> + ?Sized>(
    model: &M,
    x0: &Tensor<F>,
    labels: Option<&[usize]>,
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let xt = forward_sample(x0, &draw.t, &draw.eps, schedule)?;
    let pred = model.predict_noise(&xt, &draw.t, labels)?;
    let se: f64 = pred.data().iter().zip(draw.eps.data()).map(|(p, e)| (p.as_f64() - e.as_f64()).powi(2)).sum();
    check_loss(se / pred.len().max(1) as f64, &draw.t)
}

/// Loss and parameter gradients for a fixed noise draw.
pub fn loss_and_grads<F: Element>(
    model: &UNet<F>,
    x0: &Tensor<F>,
    labels: Option<&[usize]>,
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
    dropout_rng: Option<&mut StreamRng>,
) -> Result<LossOutput<F>> {
    let xt = forward_sample(x0, &draw.t, &draw.eps, schedule)?;
    let tape = Tape::new();
    let x = tape.constant(xt);
    let (pred, params) = model.forward(&tape, &x, &draw.t, labels, dropout_rng)?;
    let loss_var = tape.mse(&pred, &draw.eps);
    let loss = check_loss(loss_var.value().data()[0].as_f64(), &draw.t)?;
    let mut grads = tape.backward(&loss_var);
    let grads = params
        .iter()
        .map(|p| grads.take(p).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok(LossOutput { loss, grads })
}

/// One stochastic evaluation of the objective: draws `t` and `eps`, then
/// dropout masks, all from `rng`.
pub fn loss_step<F: Element>(
    model: &UNet<F>,
    x0: &Tensor<F>,
    labels: Option<&[usize]>,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<LossOutput<F>> {
    if let Some(v) = x0.data().iter().find(|v| !(v.abs() <= F::one())) {
        return Err(Error::InvalidArgument(format!("training batch pixel {v:?} outside [-1, 1]")));
    }
    let draw = NoiseDraw::sample(x0.shape(), schedule.steps(), rng);
    loss_and_grads(model, x0, labels, &draw, schedule, Some(rng))
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(params: &[Param<f32>], learning_rate: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut [Param<f32>], grads: &[Tensor<f32>], clip: f64) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at optimizer step {}", self.step + 1)));
        }
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let (bc1, bc2_sqrt, scale) = (bc1 as f32, bc2.sqrt() as f32, scale as f32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let w = Arc::make_mut(&mut p.value);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(norm)
    }

    pub fn to_checkpoint(&self, params: &[Param<f32>]) -> Checkpoint {
        let meta = serde_json::json!({
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        });
        let mut ck = Checkpoint::new(OPTIMIZER_KIND, meta);
        for (p, (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            ck.push(format!("m/{}", p.name), m.clone());
            ck.push(format!("v/{}", p.name), v.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &[Param<f32>], path: &Path) -> Result<Self> {
        if ck.kind != OPTIMIZER_KIND {
            return Err(Error::format(path, format!("expected an optimizer state, found `{}`", ck.kind)));
        }
        let real = |k: &str| ck.meta[k].as_f64().ok_or_else(|| Error::format(path, format!("missing `{k}`")));
        let mut adam = Adam::new(params, real("learning_rate")?);
        adam.beta1 = real("beta1")?;
        adam.beta2 = real("beta2")?;
        adam.eps = real("eps")?;
        adam.step = ck.meta["step"].as_u64().ok_or_else(|| Error::format(path, "missing `step`"))?;
        for (i, p) in params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = ck
                    .get(&format!("{prefix}/{}", p.name))
                    .ok_or_else(|| Error::format(path, format!("missing moment for `{}`", p.name)))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::format(path, format!("moment shape mismatch for `{}`", p.name)));
                }
                *slot = t.clone();
            }
        }
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStat>,
    pub steps: u64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Checkpoint metadata stored next to the weights so sampling and resuming
/// need nothing else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schedule: ScheduleConfig,
    pub norm_params: Option<NormalizationParams>,
    pub class_names: Vec<String>,
    pub train: TrainConfig,
    pub epochs_done: usize,
    pub step: u64,
}

impl RunMetadata {
    pub fn from_extra(extra: &serde_json::Value, path: &Path) -> Result<Self> {
        serde_json::from_value(extra.clone()).map_err(|e| Error::format(path, format!("missing run metadata: {e}")))
    }
}

/// A model, its optimizer and the position in the run.
pub struct Trainer {
    model: DenoiserModel,
    optimizer: Adam,
    config: TrainConfig,
    schedule: NoiseSchedule,
    step: u64,
    history: Vec<EpochStat>,
}

impl Trainer {
    pub fn new(model: DenoiserModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        if model.config().timesteps != schedule.steps() {
            return Err(Error::ConfigConflict(format!(
                "model embeds {} timesteps, schedule has {}",
                model.config().timesteps,
                schedule.steps()
            )));
        }
        if model.is_conditional() != config.conditional {
            return Err(Error::ConfigConflict(format!(
                "conditional training requested: {}, model conditional: {}",
                config.conditional,
                model.is_conditional()
            )));
        }
        let optimizer = Adam::new(model.params(), config.learning_rate);
        Ok(Trainer { model, optimizer, config, schedule, step: 0, history: Vec::new() })
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Moves the epoch target, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        self.config.epochs = epochs;
        Ok(())
    }

    pub fn history(&self) -> &[EpochStat] {
        &self.history
    }

    /// One optimization step. The noise stream depends only on the seed and
    /// the global step index.
    pub fn step(&mut self, x0: &Tensor<f32>, labels: Option<&[usize]>) -> Result<f64> {
        let labels = if self.config.conditional { labels } else { None };
        let mut rng = rng::stream(derive_seed(self.config.seed, tag("step")), self.step);
        let out = loss_step(&self.model, x0, labels, &self.schedule, &mut rng)?;
        self.optimizer.update(self.model.params_mut(), &out.grads, self.config.grad_clip)?;
        self.step += 1;
        Ok(out.loss)
    }

    /// Batch order for epoch `epoch` (0-based).
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(derive_seed(self.config.seed, tag("shuffle")), epoch as u64));
        order
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let size = self.model.config().image_size;
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if data.image_size() != size {
            return Err(Error::ConfigConflict(format!("dataset images are {0}x{0}, model expects {size}x{size}", data.image_size())));
        }
        if self.config.conditional {
            if !data.is_labeled() {
                return Err(Error::ConfigConflict("conditional training needs a labeled dataset".into()));
            }
            let k = self.model.config().num_classes.unwrap_or(0);
            if data.num_classes != k {
                return Err(Error::ConfigConflict(format!("dataset has {} classes, model {k}", data.num_classes)));
            }
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStat> {
        self.check_dataset(data)?;
        let start = Instant::now();
        let order = self.epoch_order(self.history.len(), data.len());
        let mut weighted = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let (x0, labels) = data.batch(chunk);
            weighted += self.step(&x0, labels.as_deref())? * chunk.len() as f64;
            steps += 1;
        }
        let stat = EpochStat {
            epoch: self.history.len() + 1,
            mean_loss: weighted / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
            steps,
        };
        self.history.push(stat.clone());
        Ok(stat)
    }

    fn metadata(&self, data: Option<&Dataset>) -> RunMetadata {
        RunMetadata {
            schedule: self.config.schedule.clone(),
            norm_params: data.map(|d| d.norm_params),
            class_names: data.map(|d| d.class_names.clone()).unwrap_or_default(),
            train: self.config.clone(),
            epochs_done: self.history.len(),
            step: self.step,
        }
    }

    /// Writes `checkpoint_epoch_NNNN.ckpt` and the matching optimizer state.
    pub fn save_state(&self, dir: &Path, data: Option<&Dataset>) -> Result<PathBuf> {
        let epoch = self.history.len();
        let model_path = dir.join(format!("checkpoint_epoch_{epoch:04}.ckpt"));
        let meta = serde_json::to_value(self.metadata(data)).expect("metadata serializes");
        let mut ck = self.model.to_checkpoint(meta);
        if let serde_json::Value::Object(m) = &mut ck.meta {
            m.insert("history".into(), serde_json::to_value(&self.history).expect("history serializes"));
        }
        ck.save(&model_path)?;
        self.optimizer.to_checkpoint(self.model.params()).save(&optimizer_path(&model_path))?;
        Ok(model_path)
    }

    /// Restores a run from a checkpoint written by [`save_state`](Self::save_state).
    pub fn resume(model_path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(model_path)?;
        let model = UNet::from_checkpoint(&ck, model_path)?;
        let meta = RunMetadata::from_extra(&ck.meta["extra"], model_path)?;
        let history: Vec<EpochStat> = serde_json::from_value(ck.meta["history"].clone())
            .map_err(|e| Error::format(model_path, format!("missing history: {e}")))?;
        let opt_path = optimizer_path(model_path);
        let optimizer = Adam::from_checkpoint(&Checkpoint::load(&opt_path)?, model.params(), &opt_path)?;
        let mut trainer = Trainer::new(model, meta.train)?;
        trainer.optimizer = optimizer;
        trainer.step = meta.step;
        trainer.history = history;
        Ok(trainer)
    }
}

pub fn optimizer_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("adam")
}

fn write_loss_csv(path: &Path, history: &[EpochStat]) -> Result<()> {
    let mut text = String::from("epoch,mean_loss,seconds\n");
    for e in history {
        writeln!(text, "{},{:?},{:.3}", e.epoch, e.mean_loss, e.seconds).expect("string write");
    }
    write_atomic(path, text.as_bytes())
}

/// Runs the remaining epochs of `trainer`, checkpointing into `run_dir`.
pub fn fit_trainer(trainer: &mut Trainer, data: &Dataset, run_dir: Option<&Path>) -> Result<TrainReport> {
    trainer.check_dataset(data)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = serde_json::json!({ "train": trainer.config, "model": trainer.model.config() });
        write_atomic(&dir.join(CONFIG_SNAPSHOT), serde_json::to_string_pretty(&snapshot).expect("json").as_bytes())?;
    }
    let total = trainer.config.epochs;
    let every = trainer.config.checkpoint_every;
    let mut final_checkpoint = None;
    while trainer.epochs_done() < total {
        let stat = trainer.run_epoch(data)?;
        log::info!("epoch {}/{total}: loss {:.5} ({:.1}s)", stat.epoch, stat.mean_loss, stat.seconds);
        if let Some(dir) = run_dir {
            write_loss_csv(&dir.join(LOSS_CSV), trainer.history())?;
            if stat.epoch == total || (every > 0 && stat.epoch % every == 0) {
                final_checkpoint = Some(trainer.save_state(dir, Some(data))?);
            }
        }
    }
    Ok(TrainReport { epochs: trainer.history().to_vec(), steps: trainer.steps_done(), final_checkpoint })
}

/// Trains `model` on `data` for `config.epochs` epochs.
pub fn fit(model: DenoiserModel, data: &Dataset, config: &TrainConfig, run_dir: Option<&Path>) -> Result<(DenoiserModel, TrainReport)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let report = fit_trainer(&mut trainer, data, run_dir)?;
    Ok((trainer.into_model(), report))
}

pub struct PhaseReports {
    pub pretrain: TrainReport,
    pub finetune: TrainReport,
}

/// Unconditional pretraining on `clutter` for `pretrain_epochs`, then a fresh
/// class table and fine-tuning of every parameter on `targets` for `epochs`.
/// Phases checkpoint into `run_dir/pretrain` and `run_dir/finetune`.
pub fn pretrain_then_finetune(
    clutter: &Dataset,
    targets: &Dataset,
    unet: &UNetConfig,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<(DenoiserModel, PhaseReports)> {
    if clutter.image_size() != targets.image_size() {
        return Err(Error::ConfigConflict(format!(
            "clutter tiles are {0}x{0} but targets are {1}x{1}",
            clutter.image_size(),
            targets.image_size()
        )));
    }
    if !targets.is_labeled() {
        return Err(Error::Dataset("fine-tuning needs a labeled target dataset".into()));
    }
    if clutter.is_labeled() {
        log::warn!("clutter dataset carries labels; they are ignored during pretraining");
    }
    let base = UNetConfig { num_classes: None, ..unet.clone() };
    let model = UNet::build(&base, derive_seed(config.seed, tag("init")))?;
    let phase1 = TrainConfig { epochs: config.pretrain_epochs, conditional: false, ..config.clone() };
    let (model, pretrain) = fit(model, clutter, &phase1, run_dir.map(|d| d.join("pretrain")).as_deref())?;
    let model = model.with_class_table(targets.num_classes, derive_seed(config.seed, tag("finetune")))?;
    let phase2 = TrainConfig { conditional: true, ..config.clone() };
    let (model, finetune) = fit(model, targets, &phase2, run_dir.map(|d| d.join("finetune")).as_deref())?;
    Ok((model, PhaseReports { pretrain, finetune }))
}
