use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::selfies::MAX_LEN;

/// Network shape and adapter hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Prepend a property token to the encoder input in conditional mode.
    pub property_token: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2+2 layers, width 128, 4 heads, 32 latent dims.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 256,
            latent_dim: 32,
            vocab_size,
            max_len: MAX_LEN,
            lora_rank: 4,
            lora_alpha: 8.0,
            property_token: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be at least 1");
        }
        if self.vocab_size <= 4 {
            return bad("vocabulary needs at least one non-special token");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1");
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive");
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 12] = [
        "n_encoder_layers",
        "n_decoder_layers",
        "n_heads",
        "d_model",
        "d_ff",
        "latent_dim",
        "vocab_size",
        "max_len",
        "lora_rank",
        "lora_alpha",
        "property_token",
        "init_seed",
    ];

    /// Overrides defaults with any model keys present in `kv`.
    pub fn with_overrides(mut self, kv: &KeyValues) -> Result<ModelConfig> {
        self.n_encoder_layers = kv.get_or("n_encoder_layers", self.n_encoder_layers)?;
        self.n_decoder_layers = kv.get_or("n_decoder_layers", self.n_decoder_layers)?;
        self.n_heads = kv.get_or("n_heads", self.n_heads)?;
        let old_d = self.d_model;
        self.d_model = kv.get_or("d_model", self.d_model)?;
        if self.d_model != old_d && kv.get_str("d_ff").is_none() {
            self.d_ff = 2 * self.d_model;
        }
        self.d_ff = kv.get_or("d_ff", self.d_ff)?;
        self.latent_dim = kv.get_or("latent_dim", self.latent_dim)?;
        self.vocab_size = kv.get_or("vocab_size", self.vocab_size)?;
        self.max_len = kv.get_or("max_len", self.max_len)?;
        self.lora_rank = kv.get_or("lora_rank", self.lora_rank)?;
        self.lora_alpha = kv.get_or("lora_alpha", self.lora_alpha)?;
        self.property_token = kv.get_or("property_token", self.property_token)?;
        self.init_seed = kv.get_or("init_seed", self.init_seed)?;
        self.validate()?;
        Ok(self)
    }

    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("n_encoder_layers", self.n_encoder_layers);
        kv.set("n_decoder_layers", self.n_decoder_layers);
        kv.set("n_heads", self.n_heads);
        kv.set("d_model", self.d_model);
        kv.set("d_ff", self.d_ff);
        kv.set("latent_dim", self.latent_dim);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_len", self.max_len);
        kv.set("lora_rank", self.lora_rank);
        kv.set("lora_alpha", self.lora_alpha);
        kv.set("property_token", self.property_token);
        kv.set("init_seed", self.init_seed);
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_roundtrip() {
        let kv = KeyValues::parse("d_model=64\nlatent_dim=16\n").unwrap();
        let c = ModelConfig::desk(20).with_overrides(&kv).unwrap();
        assert_eq!((c.d_model, c.d_ff, c.latent_dim), (64, 128, 16));
        let mut out = KeyValues::default();
        c.write_to(&mut out);
        assert_eq!(ModelConfig::desk(5).with_overrides(&out).unwrap(), c);
    }

    #[test]
    fn invalid() {
        let kv = KeyValues::parse("d_model=30\nn_heads=4\n").unwrap();
        assert!(ModelConfig::desk(20).with_overrides(&kv).is_err());
        let kv = KeyValues::parse("latent_dim=0\n").unwrap();
        assert!(ModelConfig::desk(20).with_overrides(&kv).is_err());
    }
}
