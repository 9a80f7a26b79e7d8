//! Training configuration as flat `key = value` lines.
//!
//! Keys are dotted (`optimizer.kind = lamb`). Blank lines and lines starting
//! with `#` are ignored. [`TrainConfig::to_kv_string`] prints every key in a
//! fixed order, and parsing that output reproduces the configuration exactly.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BatchMode;
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerKind, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchModeKind {
    Poisson,
    Shuffle,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrivacyMode {
    /// No noise and no accounting.
    Off,
    /// Calibrate the noise multiplier to `(epsilon, delta)`.
    Target,
    /// Use `noise_multiplier` as given and report the resulting epsilon.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    Zero,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub base_rate: f64,
    pub warmup_steps: u64,
    /// Added to `warmup_steps` after conversion with the epoch length.
    pub warmup_epochs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub mode: BatchModeKind,
    pub sampling_rate: f64,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub mode: PrivacyMode,
    pub epsilon: f64,
    pub delta: f64,
    pub noise_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub kind: InitKind,
    pub stddev: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: u64,
    /// Explicit step count; overrides `epochs` when set.
    pub steps: Option<u64>,
    /// One full-batch update: forces `batch.mode = full` and one step.
    pub single_step: bool,
    pub batch: BatchConfig,
    pub privacy: PrivacyConfig,
    /// `None` disables clipping (allowed only with privacy off).
    pub clip_norm: Option<f64>,
    pub init: InitConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::with_kind(OptimizerKind::Adam),
            schedule: ScheduleConfig {
                kind: ScheduleKind::Constant,
                base_rate: 1e-3,
                warmup_steps: 0,
                warmup_epochs: 0.0,
            },
            epochs: 1,
            steps: None,
            single_step: false,
            batch: BatchConfig {
                mode: BatchModeKind::Full,
                sampling_rate: 0.01,
                size: 256,
            },
            privacy: PrivacyConfig {
                mode: PrivacyMode::Target,
                epsilon: 10.0,
                delta: 1e-6,
                noise_multiplier: 1.0,
            },
            clip_norm: Some(1.0),
            init: InitConfig {
                kind: InitKind::Zero,
                stddev: 0.0,
                bias: -10.0,
            },
            seed: 0,
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "optimizer.kind",
    "optimizer.momentum",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.weight_decay",
    "schedule.kind",
    "schedule.base_rate",
    "schedule.warmup_steps",
    "schedule.warmup_epochs",
    "train.epochs",
    "train.steps",
    "train.single_step",
    "batch.mode",
    "batch.sampling_rate",
    "batch.size",
    "privacy.mode",
    "privacy.epsilon",
    "privacy.delta",
    "privacy.noise_multiplier",
    "clip.norm",
    "init.kind",
    "init.stddev",
    "init.bias",
    "seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = '{value}': expected true or false"))),
    }
}

impl TrainConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "optimizer.kind" => self.optimizer.kind = v.parse()?,
            "optimizer.momentum" => self.optimizer.momentum = parse(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "optimizer.eps" => self.optimizer.eps = parse(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "schedule.kind" => self.schedule.kind = v.parse()?,
            "schedule.base_rate" => self.schedule.base_rate = parse(key, v)?,
            "schedule.warmup_steps" => self.schedule.warmup_steps = parse(key, v)?,
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.steps" => {
                self.steps = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "train.single_step" => self.single_step = parse_bool(key, v)?,
            "batch.mode" => {
                self.batch.mode = match v {
                    "poisson" => BatchModeKind::Poisson,
                    "shuffle" => BatchModeKind::Shuffle,
                    "full" => BatchModeKind::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key} = '{v}': expected poisson, shuffle or full"
                        )))
                    }
                }
            }
            "batch.sampling_rate" => self.batch.sampling_rate = parse(key, v)?,
            "batch.size" => self.batch.size = parse(key, v)?,
            "privacy.mode" => {
                self.privacy.mode = match v {
                    "off" => PrivacyMode::Off,
                    "target" => PrivacyMode::Target,
                    "fixed" => PrivacyMode::Fixed,
                    _ => return Err(Error::Config(format!("{key} = '{v}': expected off, target or fixed"))),
                }
            }
            "privacy.epsilon" => self.privacy.epsilon = parse(key, v)?,
            "privacy.delta" => self.privacy.delta = parse(key, v)?,
            "privacy.noise_multiplier" => self.privacy.noise_multiplier = parse(key, v)?,
            "clip.norm" => {
                self.clip_norm = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "init.kind" => {
                self.init.kind = match v {
                    "zero" => InitKind::Zero,
                    "gaussian" => InitKind::Gaussian,
                    _ => return Err(Error::Config(format!("{key} = '{v}': expected zero or gaussian"))),
                }
            }
            "init.stddev" => self.init.stddev = parse(key, v)?,
            "init.bias" => self.init.bias = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "optimizer.kind" => self.optimizer.kind.as_str().to_string(),
            "optimizer.momentum" => self.optimizer.momentum.to_string(),
            "optimizer.beta1" => self.optimizer.beta1.to_string(),
            "optimizer.beta2" => self.optimizer.beta2.to_string(),
            "optimizer.eps" => self.optimizer.eps.to_string(),
            "optimizer.weight_decay" => self.optimizer.weight_decay.to_string(),
            "schedule.kind" => self.schedule.kind.as_str().to_string(),
            "schedule.base_rate" => self.schedule.base_rate.to_string(),
            "schedule.warmup_steps" => self.schedule.warmup_steps.to_string(),
            "schedule.warmup_epochs" => self.schedule.warmup_epochs.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.steps" => self.steps.map_or("auto".to_string(), |s| s.to_string()),
            "train.single_step" => self.single_step.to_string(),
            "batch.mode" => match self.batch.mode {
                BatchModeKind::Poisson => "poisson",
                BatchModeKind::Shuffle => "shuffle",
                BatchModeKind::Full => "full",
            }
            .to_string(),
            "batch.sampling_rate" => self.batch.sampling_rate.to_string(),
            "batch.size" => self.batch.size.to_string(),
            "privacy.mode" => match self.privacy.mode {
                PrivacyMode::Off => "off",
                PrivacyMode::Target => "target",
                PrivacyMode::Fixed => "fixed",
            }
            .to_string(),
            "privacy.epsilon" => self.privacy.epsilon.to_string(),
            "privacy.delta" => self.privacy.delta.to_string(),
            "privacy.noise_multiplier" => self.privacy.noise_multiplier.to_string(),
            "clip.norm" => self.clip_norm.map_or("none".to_string(), |c| c.to_string()),
            "init.kind" => match self.init.kind {
                InitKind::Zero => "zero",
                InitKind::Gaussian => "gaussian",
            }
            .to_string(),
            "init.stddev" => self.init.stddev.to_string(),
            "init.bias" => self.init.bias.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_kv(text)?;
        Ok(config)
    }

    /// All keys with their resolved values.
    pub fn to_kv_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Checks value ranges that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.schedule.base_rate >= 0.0 && self.schedule.base_rate.is_finite()) {
            return Err(Error::Config("schedule.base_rate must be a nonnegative number".into()));
        }
        if !(self.schedule.warmup_epochs >= 0.0) {
            return Err(Error::Config("schedule.warmup_epochs must be nonnegative".into()));
        }
        if !self.single_step && self.steps.is_none() && self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("train.steps must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip.norm = {c} must be positive")));
            }
        }
        if self.privacy.mode != PrivacyMode::Off {
            if self.clip_norm.is_none() {
                return Err(Error::Config("privacy requires a clip norm".into()));
            }
            if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
                return Err(Error::Config(format!(
                    "privacy.delta = {} outside (0, 1)",
                    self.privacy.delta
                )));
            }
        }
        match self.privacy.mode {
            PrivacyMode::Target if !(self.privacy.epsilon > 0.0) => {
                return Err(Error::Config("privacy.epsilon must be positive".into()));
            }
            PrivacyMode::Fixed if !(self.privacy.noise_multiplier >= 0.0) => {
                return Err(Error::Config("privacy.noise_multiplier must be nonnegative".into()));
            }
            _ => {}
        }
        if !(self.init.stddev >= 0.0) || !self.init.bias.is_finite() {
            return Err(Error::Config(
                "init.stddev must be nonnegative and init.bias finite".into(),
            ));
        }
        Ok(())
    }

    /// Batch mode after applying `single_step`.
    pub fn batch_mode(&self) -> BatchMode {
        if self.single_step {
            return BatchMode::Full;
        }
        match self.batch.mode {
            BatchModeKind::Poisson => BatchMode::Poisson {
                rate: self.batch.sampling_rate,
            },
            BatchModeKind::Shuffle => BatchMode::Shuffle {
                batch_size: self.batch.size,
            },
            BatchModeKind::Full => BatchMode::Full,
        }
    }
}
