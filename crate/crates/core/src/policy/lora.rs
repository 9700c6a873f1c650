use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::Tensor;

/// Projection a LoRA adapter can target inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
    Gate,
}

impl TargetKind {
    pub const ALL: [TargetKind; 7] = [
        TargetKind::Q,
        TargetKind::K,
        TargetKind::V,
        TargetKind::O,
        TargetKind::Up,
        TargetKind::Down,
        TargetKind::Gate,
    ];

    /// Weight name of this projection in block `i`.
    pub fn weight_name(self, block: usize) -> String {
        match self {
            TargetKind::Q => format!("blocks.{block}.attn.q"),
            TargetKind::K => format!("blocks.{block}.attn.k"),
            TargetKind::V => format!("blocks.{block}.attn.v"),
            TargetKind::O => format!("blocks.{block}.attn.o"),
            TargetKind::Up => format!("blocks.{block}.ffn.up"),
            TargetKind::Down => format!("blocks.{block}.ffn.down"),
            TargetKind::Gate => format!("blocks.{block}.ffn.gate"),
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TargetKind::Q => "q",
            TargetKind::K => "k",
            TargetKind::V => "v",
            TargetKind::O => "o",
            TargetKind::Up => "up",
            TargetKind::Down => "down",
            TargetKind::Gate => "gate",
        };
        f.write_str(s)
    }
}

/// Which blocks and projections receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub block_indices: BTreeSet<usize>,
    pub target_kinds: BTreeSet<TargetKind>,
}

impl LayerSelection {
    /// The last `l` blocks: {n_layers − l, …, n_layers − 1}.
    pub fn top(l: usize, n_layers: usize) -> Result<Self, ModelError> {
        if l == 0 || l > n_layers {
            return Err(ModelError::Config(format!(
                "top-{l} selection needs 1 ≤ L ≤ n_layers = {n_layers}; cap L at {n_layers}"
            )));
        }
        Ok(Self {
            block_indices: (n_layers - l..n_layers).collect(),
            target_kinds: TargetKind::ALL.into_iter().collect(),
        })
    }

    pub fn all(n_layers: usize) -> Self {
        Self::top(n_layers, n_layers).expect("n_layers > 0")
    }

    pub fn with_kinds(mut self, kinds: impl IntoIterator<Item = TargetKind>) -> Self {
        self.target_kinds = kinds.into_iter().collect();
        self
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), ModelError> {
        if self.block_indices.is_empty() || self.target_kinds.is_empty() {
            return Err(ModelError::Config("empty layer selection".into()));
        }
        if let Some(&b) = self.block_indices.iter().find(|&&b| b >= n_layers) {
            return Err(ModelError::Config(format!(
                "block {b} out of range for {n_layers} layers"
            )));
        }
        Ok(())
    }

    pub fn targets(&self) -> Vec<String> {
        self.block_indices
            .iter()
            .flat_map(|&b| self.target_kinds.iter().map(move |k| k.weight_name(b)))
            .collect()
    }
}

/// Low-rank update W' = W + (alpha / rank) · B · A for a target of shape d×k.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// r × k
    pub a: Tensor,
    /// d × r
    pub b: Tensor,
}

pub const LORA_A_INIT_STD: f64 = 0.02;

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        target: String,
        d: usize,
        k: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if rank == 0 || !(alpha > 0.0) {
            return Err(ModelError::Config(format!(
                "LoRA needs rank ≥ 1 and alpha > 0 (got {rank}, {alpha})"
            )));
        }
        Ok(Self {
            target,
            rank,
            alpha,
            a: Tensor::randn(&[rank, k], LORA_A_INIT_STD, rng).with_requires_grad(true),
            b: Tensor::zeros(&[d, rank]).with_requires_grad(true),
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Dense ΔW = (alpha / rank) · B · A.
    pub fn delta(&self) -> Tensor {
        let (d, r) = (self.b.shape()[0], self.rank);
        let k = self.a.shape()[1];
        let s = self.scaling();
        let mut out = vec![0.0; d * k];
        for i in 0..d {
            for l in 0..r {
                let bil = self.b.at2(i, l);
                for j in 0..k {
                    out[i * k + j] += s * bil * self.a.at2(l, j);
                }
            }
        }
        Tensor::new(vec![d, k], out).expect("delta shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_counts_from_the_output_end() {
        let s = LayerSelection::top(2, 4).unwrap();
        assert_eq!(s.block_indices.iter().copied().collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(LayerSelection::top(4, 4).unwrap(), LayerSelection::all(4));
        assert!(LayerSelection::top(5, 4).is_err());
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut rng = crate::seed::rng(0, "t");
        let a = LoraAdapter::new("w".into(), 8, 5, 2, 4.0, &mut rng).unwrap();
        assert!(a.delta().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.trainable_count(), 2 * (8 + 5));
        assert_eq!(a.delta().shape(), &[8, 5]);
    }
}
