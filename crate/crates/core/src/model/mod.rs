//! The Transformer VAE: encoder with Gaussian pooling head, conditional
//! prior, autoregressive decoder, LoRA adapters and the guidance predictor.

mod config;
mod guidance;
mod latent;
mod lora;
mod network;
mod params;

pub use config::ModelConfig;
pub use guidance::{guided_shift, r_squared, GuidancePredictor, LatentFunction, GUIDE_HIDDEN};
pub use latent::{kl_diag_gaussians, LatentGaussian};
pub use lora::apply_lora;
pub use network::{Condition, Forward, StarVae, TokenBatch};
pub use params::{ParamGroup, ParamStore};
