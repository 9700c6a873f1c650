//! Evaluation metrics and corpus audits.

mod audit;
mod bleu;
mod classifier;
mod minhash;
mod politeness;
mod report;

pub use audit::{audit_corpus, AuditBlock, AuditConfig, AuditItem, AuditReport};
pub use bleu::{bleu4, bleu4_single, distinct2, self_bleu, BleuStats};
pub use classifier::{ClassifierConfig, Reliability, StyleClassifier};
pub use minhash::{jaccard, shingles, token_jaccard, LshIndex, MinHasher};
pub use politeness::{politeness_weight, PolitenessScorer};
pub use report::{apc, apc_from_scores, ca, pwr, sac, sac_from_posteriors, CaResult, MetricsReport, CSV_HEADER};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("contract violation: {0}")]
    Contract(String),
}
