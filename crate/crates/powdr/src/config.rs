//! Plain-text `key = value` configuration files for training runs.

use std::path::Path;

use crate::denoiser::{DenoiserConfig, Padding};
use crate::error::{PowdrError, Result};
use crate::trainer::{ConditioningMode, TrainConfig};

/// Everything a training run needs: optimizer/loop settings, schedule
/// parameters, and the network configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FullConfig {
    pub train: TrainConfig,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub net: DenoiserConfig,
    pub checkpoint_interval: u64,
}

impl FullConfig {
    pub fn desk_default() -> Self {
        FullConfig {
            train: TrainConfig::desk_default(),
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            net: DenoiserConfig::desk_default(),
            checkpoint_interval: 500,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FullConfig::desk_default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PowdrError::argument(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                PowdrError::argument(format!("line {}: invalid {what} value {value:?}", lineno + 1))
            };
            match key {
                "iterations" => cfg.train.iterations = value.parse().map_err(|_| bad(key))?,
                "batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad(key))?,
                "learning_rate" => cfg.train.learning_rate = value.parse().map_err(|_| bad(key))?,
                "weight_decay" => cfg.train.weight_decay = value.parse().map_err(|_| bad(key))?,
                "adam_beta1" => cfg.train.adam_beta1 = value.parse().map_err(|_| bad(key))?,
                "adam_beta2" => cfg.train.adam_beta2 = value.parse().map_err(|_| bad(key))?,
                "adam_eps" => cfg.train.adam_eps = value.parse().map_err(|_| bad(key))?,
                "conditioning_mode" => cfg.train.conditioning_mode = ConditioningMode::parse(value)?,
                "seed" => cfg.train.seed = value.parse().map_err(|_| bad(key))?,
                "T" => cfg.t_max = value.parse().map_err(|_| bad(key))?,
                "beta_start" => cfg.beta_start = value.parse().map_err(|_| bad(key))?,
                "beta_end" => cfg.beta_end = value.parse().map_err(|_| bad(key))?,
                "base_channels" => cfg.net.base_channels = value.parse().map_err(|_| bad(key))?,
                "channel_multipliers" => {
                    cfg.net.channel_multipliers = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().map_err(|_| bad(key)))
                        .collect::<Result<Vec<usize>>>()?;
                }
                "blocks_per_level" => cfg.net.blocks_per_level = value.parse().map_err(|_| bad(key))?,
                "dropout_rate" => cfg.net.dropout_rate = value.parse().map_err(|_| bad(key))?,
                "time_embed_dim" => cfg.net.time_embed_dim = value.parse().map_err(|_| bad(key))?,
                "checkpoint_interval" => cfg.checkpoint_interval = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(PowdrError::argument(format!(
                        "unknown config key {other:?} on line {}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.net.padding = Padding::Zero;
        cfg.net.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mults: Vec<String> = self.net.channel_multipliers.iter().map(|m| m.to_string()).collect();
        format!(
            "iterations = {}\nbatch_size = {}\nlearning_rate = {}\nweight_decay = {}\n\
             adam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\nconditioning_mode = {}\n\
             seed = {}\nT = {}\nbeta_start = {}\nbeta_end = {}\nbase_channels = {}\n\
             channel_multipliers = {}\nblocks_per_level = {}\ndropout_rate = {}\n\
             time_embed_dim = {}\ncheckpoint_interval = {}\n",
            self.train.iterations,
            self.train.batch_size,
            self.train.learning_rate,
            self.train.weight_decay,
            self.train.adam_beta1,
            self.train.adam_beta2,
            self.train.adam_eps,
            self.train.conditioning_mode.as_str(),
            self.train.seed,
            self.t_max,
            self.beta_start,
            self.beta_end,
            self.net.base_channels,
            mults.join(","),
            self.net.blocks_per_level,
            self.net.dropout_rate,
            self.net.time_embed_dim,
            self.checkpoint_interval,
        )
    }

    /// True iff the two configs differ only in `conditioning_mode`.
    pub fn same_except_conditioning(&self, other: &FullConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.train.conditioning_mode = ConditioningMode::FixedPathology;
        b.train.conditioning_mode = ConditioningMode::FixedPathology;
        a == b
    }
}
