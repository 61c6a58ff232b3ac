//! Line-oriented `key = value` training configuration.
//!
//! `#` starts a comment; unknown keys are errors. `model` is either a preset
//! name or `custom`, in which case the architecture fields must be present.

use crate::diffusion::{LossWeighting, Parameterization, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::UDiTConfig;

/// Model selection: preset name or explicit architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Preset(String),
    Custom(UDiTConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<UDiTConfig> {
        match self {
            ModelSpec::Preset(name) => UDiTConfig::preset(name),
            ModelSpec::Custom(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub schedule: ScheduleKind,
    pub param: Parameterization,
    pub weighting: LossWeighting,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub ema_decay: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::Preset("udit-nano".into()),
            schedule: ScheduleKind::LinearInterp,
            param: Parameterization::Epsilon,
            weighting: LossWeighting::Uniform,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            total_steps: 1000,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_interval: 500,
            image_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay {} must be in [0, 1)",
                self.ema_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must be in [0, 1)")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        let model = self.model.resolve()?;
        if !self.image_size.is_multiple_of(model.down_factor) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by down_factor {}",
                self.image_size, model.down_factor
            )));
        }
        Ok(())
    }

    /// Serialize in the same `key = value` format [`parse_config`] reads.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# sprout training configuration\n");
        match &self.model {
            ModelSpec::Preset(name) => out.push_str(&format!("model = {name}\n")),
            ModelSpec::Custom(cfg) => {
                out.push_str("model = custom\n");
                out.push_str(&format!("in_channels = {}\n", cfg.in_channels));
                out.push_str(&format!("down_factor = {}\n", cfg.down_factor));
                let chans: Vec<String> =
                    cfg.stem_channels.iter().map(|c| c.to_string()).collect();
                out.push_str(&format!("stem_channels = {}\n", chans.join(",")));
                out.push_str(&format!("trunk_depth = {}\n", cfg.trunk_depth));
                out.push_str(&format!("trunk_width = {}\n", cfg.trunk_width));
                out.push_str(&format!("heads = {}\n", cfg.heads));
                out.push_str(&format!("time_embed_dim = {}\n", cfg.time_embed_dim));
                out.push_str(&format!("feature_tap_layer = {}\n", cfg.feature_tap_layer));
                out.push_str(&format!("head_zero_init = {}\n", cfg.head_zero_init));
            }
        }
        out.push_str(&format!("schedule = {}\n", self.schedule.name()));
        out.push_str(&format!("param = {}\n", self.param.name()));
        out.push_str(&format!("weighting = {}\n", self.weighting.name()));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("lr = {}\n", self.lr));
        out.push_str(&format!("beta1 = {}\n", self.beta1));
        out.push_str(&format!("beta2 = {}\n", self.beta2));
        out.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        out.push_str(&format!("total_steps = {}\n", self.total_steps));
        out.push_str(&format!("ema_decay = {}\n", self.ema_decay));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("checkpoint_interval = {}\n", self.checkpoint_interval));
        out.push_str(&format!("image_size = {}\n", self.image_size));
        out
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a nonnegative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a nonnegative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: `{v}` is not finite")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not true/false"))),
    }
}

/// Parse the `key = value` configuration text.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut model_name: Option<String> = None;
    let mut custom = UDiTConfig::preset("udit-nano").expect("builtin preset");
    let mut custom_keys_seen = false;
    let mut seen: std::collections::BTreeSet<String> = Default::default();

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("duplicate key `{key}`")));
        }
        match key {
            "model" => model_name = Some(value.to_string()),
            "in_channels" => {
                custom.in_channels = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "down_factor" => {
                custom.down_factor = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "stem_channels" => {
                let mut chans = Vec::new();
                for part in value.split(',') {
                    chans.push(parse_usize(key, part.trim())?);
                }
                custom.stem_channels = chans;
                custom_keys_seen = true;
            }
            "trunk_depth" => {
                custom.trunk_depth = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "trunk_width" => {
                custom.trunk_width = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "heads" => {
                custom.heads = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "time_embed_dim" => {
                custom.time_embed_dim = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "feature_tap_layer" => {
                custom.feature_tap_layer = parse_usize(key, value)?;
                custom_keys_seen = true;
            }
            "head_zero_init" => {
                custom.head_zero_init = parse_bool(key, value)?;
                custom_keys_seen = true;
            }
            "schedule" => cfg.schedule = ScheduleKind::parse(value)?,
            "param" => cfg.param = Parameterization::parse(value)?,
            "weighting" => cfg.weighting = LossWeighting::parse(value)?,
            "batch_size" => cfg.batch_size = parse_usize(key, value)?,
            "lr" => cfg.lr = parse_f64(key, value)?,
            "beta1" => cfg.beta1 = parse_f64(key, value)?,
            "beta2" => cfg.beta2 = parse_f64(key, value)?,
            "weight_decay" => cfg.weight_decay = parse_f64(key, value)?,
            "total_steps" => cfg.total_steps = parse_u64(key, value)?,
            "ema_decay" => cfg.ema_decay = parse_f64(key, value)?,
            "seed" => cfg.seed = parse_u64(key, value)?,
            "checkpoint_interval" => cfg.checkpoint_interval = parse_u64(key, value)?,
            "image_size" => cfg.image_size = parse_usize(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }

    cfg.model = match model_name.as_deref() {
        Some("custom") => ModelSpec::Custom(custom),
        Some(name) => {
            if custom_keys_seen {
                return Err(Error::Config(
                    "architecture keys require `model = custom`".into(),
                ));
            }
            ModelSpec::Preset(name.to_string())
        }
        None => {
            if custom_keys_seen {
                return Err(Error::Config(
                    "architecture keys require `model = custom`".into(),
                ));
            }
            cfg.model
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
