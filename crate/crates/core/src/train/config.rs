use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Optimization settings shared by pretraining and finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    /// Steps over which the KL weight ramps linearly from 0 to `beta`.
    pub beta_warmup: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Total optimizer steps for the phase, counting resumed ones.
    pub max_steps: u64,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Adapter strength used while finetuning.
    pub lora_lambda: f64,
    /// Stop early once the teacher-forced token accuracy, averaged over a
    /// logging window, reaches this value. 0 disables.
    pub stop_accuracy: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.1,
            beta_warmup: 1000,
            lr: 3e-4,
            batch_size: 32,
            max_steps: 5000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
            lora_lambda: 1.0,
            stop_accuracy: 0.0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 10] = [
        "beta",
        "beta_warmup",
        "lr",
        "batch_size",
        "max_steps",
        "seed",
        "log_every",
        "checkpoint_every",
        "lora_lambda",
        "stop_accuracy",
    ];

    pub fn with_overrides(mut self, kv: &KeyValues) -> Result<TrainConfig> {
        self.beta = kv.get_or("beta", self.beta)?;
        self.beta_warmup = kv.get_or("beta_warmup", self.beta_warmup)?;
        self.lr = kv.get_or("lr", self.lr)?;
        self.batch_size = kv.get_or("batch_size", self.batch_size)?;
        self.max_steps = kv.get_or("max_steps", self.max_steps)?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.log_every = kv.get_or("log_every", self.log_every)?;
        self.checkpoint_every = kv.get_or("checkpoint_every", self.checkpoint_every)?;
        self.lora_lambda = kv.get_or("lora_lambda", self.lora_lambda)?;
        self.stop_accuracy = kv.get_or("stop_accuracy", self.stop_accuracy)?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if !self.lora_lambda.is_finite() {
            return bad("lora_lambda must be finite");
        }
        if !(0.0..=1.0).contains(&self.stop_accuracy) {
            return bad("stop_accuracy must lie in [0, 1]");
        }
        Ok(())
    }

    /// KL weight at a 1-based step.
    pub fn beta_at(&self, step: u64) -> f64 {
        if self.beta_warmup == 0 || step >= self.beta_warmup {
            self.beta
        } else {
            self.beta * step as f64 / self.beta_warmup as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear() {
        let c = TrainConfig {
            beta_warmup: 10,
            ..TrainConfig::default()
        };
        assert_eq!(c.beta_at(0), 0.0);
        assert!((c.beta_at(5) - 0.55).abs() < 1e-12);
        assert_eq!(c.beta_at(10), 1.1);
        assert_eq!(c.beta_at(1000), 1.1);
        let fixed = TrainConfig {
            beta_warmup: 0,
            ..TrainConfig::default()
        };
        assert_eq!(fixed.beta_at(0), 1.1);
    }

    #[test]
    fn overrides() {
        let kv = KeyValues::parse("lr=1e-5\nbatch_size=0\n").unwrap();
        assert!(TrainConfig::default().with_overrides(&kv).is_err());
        let kv = KeyValues::parse("lr=1e-5\nbeta_warmup=0\n").unwrap();
        let c = TrainConfig::default().with_overrides(&kv).unwrap();
        assert_eq!((c.lr, c.beta_warmup), (1e-5, 0));
    }
}
