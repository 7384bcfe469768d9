//! Experiment configuration: built-in defaults, then the `--config` TOML
//! file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use sardiff::schedule::ScheduleKind;
use sardiff::train::TrainConfig;
use sardiff::unet::UNetConfig;

use crate::CliError;

/// Everything a training command needs. `unet.image_size`, `unet.num_classes`
/// and `unet.timesteps` are filled in from the dataset and schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Labeled training set (a dataset directory or a `prepare` output root).
    pub data: Option<PathBuf>,
    /// Unlabeled clutter set for pretraining.
    pub clutter: Option<PathBuf>,
    /// Unconditional checkpoint to fine-tune from.
    pub pretrained: Option<PathBuf>,
    /// Run directory.
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub unet: UNetConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text, p)
            }
        }
    }
}

pub fn parse_kind(s: &str) -> Result<ScheduleKind, String> {
    s.parse().map_err(|e: sardiff::Error| e.to_string())
}

/// Hyperparameter flags shared by `train`, `pretrain` and `finetune`.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// TOML experiment configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// linear, cosine or sigmoid.
    #[arg(long, value_parser = parse_kind)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Checkpoint every N epochs (0: only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Comma-separated per-level width multipliers, e.g. `1,2,4,8`.
    #[arg(long, value_delimiter = ',')]
    pub channel_mult: Option<Vec<usize>>,
    #[arg(long)]
    pub res_blocks: Option<usize>,
    #[arg(long)]
    pub attention_resolution: Option<usize>,
    #[arg(long)]
    pub time_embed_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Train without class conditioning.
    #[arg(long)]
    pub unconditional: bool,
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref())?;
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let (t, u) = (&mut cfg.train, &mut cfg.unet);
        set(&mut t.epochs, self.epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.learning_rate, self.learning_rate);
        set(&mut t.pretrain_epochs, self.pretrain_epochs);
        set(&mut t.seed, self.seed);
        set(&mut t.schedule.kind, self.schedule);
        set(&mut t.schedule.steps, self.timesteps);
        set(&mut t.schedule.beta_start, self.beta_start);
        set(&mut t.schedule.beta_end, self.beta_end);
        set(&mut t.grad_clip, self.grad_clip);
        set(&mut t.checkpoint_every, self.checkpoint_every);
        if self.unconditional {
            t.conditional = false;
        }
        set(&mut u.base_channels, self.base_channels);
        set(&mut u.channel_multipliers, self.channel_mult.clone());
        set(&mut u.res_blocks_total_per_side, self.res_blocks);
        set(&mut u.attention_resolution, self.attention_resolution);
        set(&mut u.time_embed_dim, self.time_embed_dim);
        set(&mut u.dropout, self.dropout);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
