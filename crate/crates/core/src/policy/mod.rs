//! Decoder-only transformer policy with layer-selective LoRA adapters.

mod checkpoint;
mod config;
pub mod lora;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use lora::{LayerSelection, LoraAdapter, TargetKind};
pub use model::{Binding, LogProbs, PolicyModel, ResponseForward, Sample};

use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    Vocabulary { token: usize, vocab: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
