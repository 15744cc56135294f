//! ELBO objective, pretraining and finetuning loops, guidance-predictor
//! fitting and checkpoint persistence.

mod checkpoint;
mod config;
mod elbo;
mod run;

pub use checkpoint::{Checkpoint, Phase, PropertyNorm, MAGIC, VERSION};
pub use config::TrainConfig;
pub use elbo::{argmax, elbo, token_accuracy, Elbo};
pub use run::{
    finetune_lora, posterior_means, prepare_finetune, pretrain, reconstruction_accuracy,
    train_guidance_predictor, Dataset,
    RunOptions, RunSummary, StepStats,
};
