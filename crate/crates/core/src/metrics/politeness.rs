use crate::task::{TokenId, Vocab};

/// Signed politeness weight of a vocabulary token; unlisted tokens are neutral.
pub fn politeness_weight(token: &str) -> f64 {
    match token {
        "PRAISE" => 1.5,
        "VERIFY" => 0.75,
        "FIX" => 0.25,
        "fine" => 0.25,
        "redo" => -1.0,
        "wrong" => -1.25,
        _ => 0.0,
    }
}

/// Lexicon scorer: p(y) = σ(offset + Σ weight(token)).
#[derive(Debug, Clone)]
pub struct PolitenessScorer {
    weights: Vec<f64>,
    offset: f64,
}

impl PolitenessScorer {
    pub fn new(vocab: &Vocab) -> Self {
        let weights = (0..vocab.len())
            .map(|t| politeness_weight(vocab.token(t).unwrap_or("")))
            .collect();
        Self {
            weights,
            offset: -0.5,
        }
    }

    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        let z = self.offset
            + tokens
                .iter()
                .map(|&t| self.weights.get(t).copied().unwrap_or(0.0))
                .sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }
}
