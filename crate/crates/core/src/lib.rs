//! A Transformer conditional variational autoencoder over SELFIES strings.
//!
//! The crate covers the whole pipeline: a valence-safe SELFIES codec over an
//! attributed molecular graph, a small reverse-mode tensor library, the
//! encoder/decoder network with property-conditioned prior and LoRA adapters,
//! training, sampling and distribution-learning metrics.

pub mod config;
pub mod corpus;
pub mod error;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod molgraph;
pub mod numerics;
pub mod selfies;
pub mod smiles;
pub mod train;

pub use error::{Error, ErrorClass, Result};
