//! Run configuration: a flat `key = value` text format with a strict schema.
//!
//! Unknown keys and out-of-range values are rejected with the offending key
//! named. An empty file yields the documented defaults.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mib::{Compensation, NormSource};

/// Where Stage-II training reads its conditioning images from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stage2Source {
    /// Cached Stage-I outputs (the full method).
    #[default]
    StageOne,
    /// Raw LQ images (the "without Stage I" ablation).
    Lq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier for the control branch parameters.
    pub control_lr_mult: f64,
    /// Decay of the weight moving average used for sampling; 0 disables it.
    pub ema_decay: f64,
    /// Cosine learning-rate decay floor as a fraction of `learning_rate`;
    /// 1 keeps the rate constant.
    pub lr_final_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lambda_info: f64,
    pub lambda_rec: f64,
    pub resolution: usize,
    pub sampler_steps: usize,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kl_weight: f64,
    /// Whether Stage II uses the MIB block at all (off = the plain
    /// two-pass AdaIN variant).
    pub mib_enabled: bool,
    pub compensation: Compensation,
    pub identity_norm: NormSource,
    pub stage2_source: Stage2Source,
    /// Warm-start Stage II from the Stage-I weights.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            iterations: 2000,
            batch_size: 2,
            learning_rate: 1e-4,
            control_lr_mult: 1.0,
            ema_decay: 0.995,
            lr_final_frac: 1.0,
            weight_decay: 0.0,
            seed: 0,
            lambda_info: 0.001,
            lambda_rec: 1.0,
            resolution: 64,
            sampler_steps: 50,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kl_weight: 1e-6,
            mib_enabled: true,
            compensation: Compensation::Identity,
            identity_norm: NormSource::Dataset,
            stage2_source: Stage2Source::StageOne,
            warm_start: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::config(format!("key {key:?}: {why}")));
        if self.stage != 1 && self.stage != 2 {
            return bad("stage", "must be 1 or 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.control_lr_mult > 0.0) {
            return bad("control_lr_mult", "must be positive");
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay", "must lie in [0, 1)");
        }
        if !(self.lr_final_frac > 0.0 && self.lr_final_frac <= 1.0) {
            return bad("lr_final_frac", "must lie in (0, 1]");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.lambda_info >= 0.0) {
            return bad("lambda_info", "must be >= 0");
        }
        if !(self.lambda_rec >= 0.0) {
            return bad("lambda_rec", "must be >= 0");
        }
        if self.resolution % 8 != 0 || self.resolution < 16 {
            return bad("resolution", "must be a multiple of 8, at least 16");
        }
        if self.sampler_steps < 1 || self.sampler_steps > self.t_max {
            return bad("sampler_steps", "must lie in 1..=t_max");
        }
        if self.t_max < 1 {
            return bad("t_max", "must be positive");
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("beta_start", "betas must satisfy 0 < start <= end < 1");
        }
        if self.kl_weight < 0.0 {
            return bad("kl_weight", "must be >= 0");
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad_value =
                || Error::config(format!("key {key:?}: cannot parse value {value:?}"));
            match key {
                "stage" => cfg.stage = value.parse().map_err(|_| bad_value())?,
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad_value())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad_value())?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad_value())?,
                "control_lr_mult" => cfg.control_lr_mult = value.parse().map_err(|_| bad_value())?,
                "ema_decay" => cfg.ema_decay = value.parse().map_err(|_| bad_value())?,
                "lr_final_frac" => cfg.lr_final_frac = value.parse().map_err(|_| bad_value())?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad_value())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad_value())?,
                "lambda_info" => cfg.lambda_info = value.parse().map_err(|_| bad_value())?,
                "lambda_rec" => cfg.lambda_rec = value.parse().map_err(|_| bad_value())?,
                "resolution" => cfg.resolution = value.parse().map_err(|_| bad_value())?,
                "sampler_steps" => cfg.sampler_steps = value.parse().map_err(|_| bad_value())?,
                "t_max" => cfg.t_max = value.parse().map_err(|_| bad_value())?,
                "beta_start" => cfg.beta_start = value.parse().map_err(|_| bad_value())?,
                "beta_end" => cfg.beta_end = value.parse().map_err(|_| bad_value())?,
                "kl_weight" => cfg.kl_weight = value.parse().map_err(|_| bad_value())?,
                "mib_enabled" => cfg.mib_enabled = value.parse().map_err(|_| bad_value())?,
                "compensation" => {
                    cfg.compensation = match value {
                        "identity" => Compensation::Identity,
                        "noise" => Compensation::Noise,
                        "none" => Compensation::None,
                        _ => return Err(bad_value()),
                    }
                }
                "identity_norm" => {
                    cfg.identity_norm = match value {
                        "dataset" => NormSource::Dataset,
                        "instance" => NormSource::Instance,
                        _ => return Err(bad_value()),
                    }
                }
                "stage2_source" => {
                    cfg.stage2_source = match value {
                        "d1" => Stage2Source::StageOne,
                        "lq" => Stage2Source::Lq,
                        _ => return Err(bad_value()),
                    }
                }
                "warm_start" => cfg.warm_start = value.parse().map_err(|_| bad_value())?,
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: impl AsRef<Path>) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path.as_ref())?;
        TrainConfig::parse_str(&text)
    }

    /// Canonical serialization; parsing it back yields an identical config.
    pub fn to_config_string(&self) -> String {
        let comp = match self.compensation {
            Compensation::Identity => "identity",
            Compensation::Noise => "noise",
            Compensation::None => "none",
        };
        let norm = match self.identity_norm {
            NormSource::Dataset => "dataset",
            NormSource::Instance => "instance",
        };
        let src = match self.stage2_source {
            Stage2Source::StageOne => "d1",
            Stage2Source::Lq => "lq",
        };
        format!(
            "stage = {}\niterations = {}\nbatch_size = {}\nlearning_rate = {}\n\
             control_lr_mult = {}\nema_decay = {}\nlr_final_frac = {}\nweight_decay = {}\nseed = {}\nlambda_info = {}\nlambda_rec = {}\n\
             resolution = {}\nsampler_steps = {}\nt_max = {}\nbeta_start = {}\n\
             beta_end = {}\nkl_weight = {}\nmib_enabled = {}\ncompensation = {comp}\n\
             identity_norm = {norm}\nstage2_source = {src}\nwarm_start = {}\n",
            self.stage,
            self.iterations,
            self.batch_size,
            self.learning_rate,
            self.control_lr_mult,
            self.ema_decay,
            self.lr_final_frac,
            self.weight_decay,
            self.seed,
            self.lambda_info,
            self.lambda_rec,
            self.resolution,
            self.sampler_steps,
            self.t_max,
            self.beta_start,
            self.beta_end,
            self.kl_weight,
            self.mib_enabled,
            self.warm_start,
        )
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_config_string())?;
        Ok(())
    }
}
