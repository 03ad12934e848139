//! Training hyperparameters and the flat `key = value` config format.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvKind;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Episodes sampled per update.
    pub batch_size: usize,
    pub gamma: f64,
    /// Completed episodes between target copies.
    pub target_update_interval: usize,
    pub rmsprop_alpha: f64,
    pub rmsprop_eps: f64,
    pub max_steps: u64,
    pub feature_dim: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub delta: f64,
    pub penalty: bool,
    pub penalty_weight: f64,
    /// Train steps between penalty evaluations.
    pub penalty_interval: u64,
    /// Episodes held in replay.
    pub buffer_capacity: usize,
    /// Environment steps per metrics row.
    pub metrics_interval: u64,
    /// Greedy evaluation episodes per metrics row.
    pub eval_episodes: usize,
    /// Distinct recent joint observations used for the IGM rate.
    pub igm_window: usize,
    pub seed: u64,
    /// Record elapsed seconds in the metrics; off keeps output byte-stable.
    pub wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            gamma: 0.99,
            target_update_interval: 100,
            rmsprop_alpha: 0.99,
            rmsprop_eps: 1e-8,
            max_steps: 40_000,
            feature_dim: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 30_000,
            delta: 0.5,
            penalty: true,
            penalty_weight: 1.0,
            penalty_interval: 1,
            buffer_capacity: 5000,
            metrics_interval: 1000,
            eval_episodes: 10,
            igm_window: 32,
            seed: 0,
            wallclock: false,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "learning_rate",
    "batch_size",
    "gamma",
    "target_update_interval",
    "rmsprop_alpha",
    "rmsprop_eps",
    "max_steps",
    "feature_dim",
    "epsilon_start",
    "epsilon_end",
    "epsilon_decay_steps",
    "delta",
    "penalty",
    "penalty_weight",
    "penalty_interval",
    "buffer_capacity",
    "metrics_interval",
    "eval_episodes",
    "igm_window",
    "seed",
    "wallclock",
];

impl TrainConfig {
    /// Defaults with the per-task step budget and exploration schedule.
    pub fn for_env(kind: EnvKind) -> Self {
        let (max_steps, epsilon_end, epsilon_decay_steps) = match kind {
            EnvKind::Matrix => (40_000, 0.05, 30_000),
            EnvKind::Blocker => (200_000, 0.01, 100_000),
            EnvKind::Spread => (100_000, 0.1, 10_000),
            EnvKind::PredPrey => (4_000_000, 0.1, 300_000),
            EnvKind::PredPreySmall => (300_000, 0.1, 300_000),
        };
        Self {
            max_steps,
            epsilon_end,
            epsilon_decay_steps,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "target_update_interval" => self.target_update_interval = parse(key, v)?,
            "rmsprop_alpha" => self.rmsprop_alpha = parse(key, v)?,
            "rmsprop_eps" => self.rmsprop_eps = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "epsilon_start" => self.epsilon_start = parse(key, v)?,
            "epsilon_end" => self.epsilon_end = parse(key, v)?,
            "epsilon_decay_steps" => self.epsilon_decay_steps = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "penalty" => self.penalty = parse_bool(key, v)?,
            "penalty_weight" => self.penalty_weight = parse(key, v)?,
            "penalty_interval" => self.penalty_interval = parse(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, v)?,
            "metrics_interval" => self.metrics_interval = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "igm_window" => self.igm_window = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "wallclock" => self.wallclock = parse_bool(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a flat config file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::BadValue {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", self.learning_rate.to_string(), "must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "0".into(), "must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", self.gamma.to_string(), "must lie in [0, 1]");
        }
        if self.target_update_interval == 0 {
            return bad("target_update_interval", "0".into(), "must be positive");
        }
        if !(0.0..1.0).contains(&self.rmsprop_alpha) {
            return bad("rmsprop_alpha", self.rmsprop_alpha.to_string(), "must lie in [0, 1)");
        }
        if !pos(self.rmsprop_eps) {
            return bad("rmsprop_eps", self.rmsprop_eps.to_string(), "must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "0".into(), "must be positive");
        }
        for (key, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(key, e.to_string(), "must lie in [0, 1]");
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta", self.delta.to_string(), "must lie in (0, 1]");
        }
        if !(self.penalty_weight.is_finite() && self.penalty_weight >= 0.0) {
            return bad("penalty_weight", self.penalty_weight.to_string(), "must be finite and >= 0");
        }
        if self.penalty_interval == 0 {
            return bad("penalty_interval", "0".into(), "must be positive");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity", self.buffer_capacity.to_string(), "must be at least batch_size");
        }
        if self.metrics_interval == 0 {
            return bad("metrics_interval", "0".into(), "must be positive");
        }
        if self.igm_window == 0 {
            return bad("igm_window", "0".into(), "must be positive");
        }
        Ok(())
    }

    /// Linearly decayed exploration rate at an environment step.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        if step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.trim().into(),
        value: v.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.trim().into(),
            value: v.into(),
            reason: "expected a boolean".into(),
        }),
    }
}

/// Splits `key = value` lines, rejecting unknown keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
