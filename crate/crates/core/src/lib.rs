//! Softmax tempering laboratory.
//!
//! A small transformer encoder-decoder trained on synthetic transduction
//! tasks, with the pre-softmax logits divided by a temperature during
//! training. The crate covers the full experimental loop: data generation,
//! reverse-mode autodiff, training with early stopping and checkpoint
//! averaging, greedy and beam decoding, BLEU and significance testing, and
//! sweep/analysis drivers that emit CSV curves.

pub mod data;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod tempering;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
