//! Synthetic feedback task: closed vocabulary, professor and generic
//! response templates, oracles for style and correctness, and the JSONL
//! dataset formats.

pub mod io;
pub mod split;
pub mod synth;
pub mod vocab;

pub use synth::{
    extract_judgment, gen_demonstrations, gen_demonstrations_for, gen_generic_corpus,
    gen_preferences, gen_style_corpus, generic_response, oracle_correct, oracle_style,
    professor_response, prompt_label, Demonstration, LabeledExample, LoserKind, PreferencePair,
    SyntheticSpec,
};
pub use vocab::{TokenId, Vocab, VocabManifest};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("malformed record on line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
