use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::DistanceParams;

/// Everything `fit` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub distance: DistanceParams,
    /// Target length `T`.
    pub targets: usize,
    pub learning_rate: f64,
    /// Hinge margin `λ`.
    pub margin: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub negatives_per_positive: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            distance: DistanceParams::default(),
            targets: 3,
            learning_rate: 0.05,
            margin: 0.5,
            batch_size: 4096,
            l2: 1e-3,
            epochs: 20,
            seed: 0,
            negatives_per_positive: 1,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in the order
/// [`TrainConfig::to_kv`] prints them.
pub const CONFIG_KEYS: &[&str] = &[
    "dim",
    "window",
    "targets",
    "boxes",
    "mode",
    "memory_slots",
    "pooling",
    "dropout",
    "ablation",
    "freeze_offsets",
    "init_std",
    "offset_bias_init",
    "gamma",
    "alpha",
    "use_additional",
    "learning_rate",
    "margin",
    "batch_size",
    "l2",
    "epochs",
    "seed",
    "negatives_per_positive",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.distance.validate()?;
        if self.targets == 0 {
            return Err(Error::invalid("targets must be at least 1"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        // Zero is allowed so that a run can be replayed without updates.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be non-negative"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::invalid("l2 must be non-negative"));
        }
        if self.batch_size == 0 || self.negatives_per_positive == 0 {
            return Err(Error::invalid("batch_size and negatives_per_positive must be positive"));
        }
        Ok(())
    }

    /// Sets one `key=value` entry; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        match key {
            "dim" => e.dim = parse(key, value)?,
            "window" => e.window = parse(key, value)?,
            "targets" => self.targets = parse(key, value)?,
            "boxes" => e.boxes = parse(key, value)?,
            "mode" => e.mode = value.parse()?,
            "memory_slots" => e.memory_slots = parse(key, value)?,
            "pooling" => e.pooling = value.parse()?,
            "dropout" => e.dropout = parse(key, value)?,
            "ablation" => e.ablation = value.parse()?,
            "freeze_offsets" => e.freeze_offsets = parse(key, value)?,
            "init_std" => e.init_std = parse(key, value)?,
            "offset_bias_init" => e.offset_bias_init = parse(key, value)?,
            "gamma" => self.distance.gamma = parse(key, value)?,
            "alpha" => self.distance.alpha = parse(key, value)?,
            "use_additional" => self.distance.use_additional = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "negatives_per_positive" => self.negatives_per_positive = parse(key, value)?,
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key=value", k + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", k + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv_text(text)?;
        Ok(c)
    }

    /// The resolved configuration as `key=value` lines that
    /// [`TrainConfig::from_kv_text`] reads back.
    pub fn to_kv(&self) -> String {
        let e = &self.encoder;
        let values: Vec<String> = vec![
            e.dim.to_string(),
            e.window.to_string(),
            self.targets.to_string(),
            e.boxes.to_string(),
            e.mode.to_string(),
            e.memory_slots.to_string(),
            e.pooling.to_string(),
            e.dropout.to_string(),
            e.ablation.name().to_string(),
            e.freeze_offsets.to_string(),
            e.init_std.to_string(),
            e.offset_bias_init.to_string(),
            self.distance.gamma.to_string(),
            self.distance.alpha.to_string(),
            self.distance.use_additional.to_string(),
            self.learning_rate.to_string(),
            self.margin.to_string(),
            self.batch_size.to_string(),
            self.l2.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.negatives_per_positive.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
