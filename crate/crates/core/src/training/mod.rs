//! Optimization: learning-rate schedule, Adam, label-smoothed loss, and the
//! character-budget accumulation loop.

mod adam;
mod loss;
mod schedule;
mod trainer;

pub use adam::{adam_step, AdamState};
pub use loss::{label_smoothed_loss, LossConfig};
pub use schedule::{noam_lr, NoamSchedule};
pub use trainer::{train_loop, Control, TrainSummary, Trainer, UpdateStats};

pub use crate::model::char_dropout;

use crate::config::{format_optional, parse_kv, parse_optional, parse_value};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Everything a training run needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub init_lr: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    /// Non-pad target characters (including `</s>`) per optimizer update.
    pub char_budget: usize,
    /// Padded frames per mini-batch.
    pub batch_frames: usize,
    pub max_updates: u64,
    pub max_epochs: Option<usize>,
    /// Dev loss is measured and checkpoints written every this many updates.
    pub checkpoint_every: u64,
    /// Stop after this many dev evaluations without improvement.
    pub patience: Option<usize>,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 1,
            init_lr: 2.0,
            warmup: 8000,
            label_smoothing: 0.1,
            char_budget: 25000,
            batch_frames: 20000,
            max_updates: 100_000,
            max_epochs: None,
            checkpoint_every: 1000,
            patience: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Reads `key = value` text holding training and model keys. Unknown keys
    /// are an error.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "init_lr" => self.init_lr = parse_value(key, value)?,
            "warmup" => self.warmup = parse_value(key, value)?,
            "label_smoothing" => self.label_smoothing = parse_value(key, value)?,
            "char_budget" => self.char_budget = parse_value(key, value)?,
            "batch_frames" => self.batch_frames = parse_value(key, value)?,
            "max_updates" => self.max_updates = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_optional(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "patience" => self.patience = parse_optional(key, value)?,
            "clip_norm" => self.clip_norm = parse_optional(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::config(format!("unknown configuration key {key}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        NoamSchedule::new(self.init_lr, self.model.d_model, self.warmup)?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.char_budget == 0 || self.batch_frames == 0 || self.checkpoint_every == 0 {
            return Err(Error::config("char_budget, batch_frames and checkpoint_every must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let own = [
            ("seed", self.seed.to_string()),
            ("init_lr", self.init_lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("char_budget", self.char_budget.to_string()),
            ("batch_frames", self.batch_frames.to_string()),
            ("max_updates", self.max_updates.to_string()),
            ("max_epochs", format_optional(&self.max_epochs)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("patience", format_optional(&self.patience)),
            ("clip_norm", format_optional(&self.clip_norm)),
        ];
        let mut out: String = own.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        out.push_str(&self.model.to_text());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.char_budget = 300;
        cfg.clip_norm = Some(5.0);
        cfg.model.enc_layers = 3;
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(TrainConfig::from_text("learning_rate = 1\n"), Err(Error::Config(_))));
        assert!(TrainConfig::from_text("warmup = 0\n").is_err());
    }
}
