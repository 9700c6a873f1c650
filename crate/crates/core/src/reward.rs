//! Scalar reward model trained on pairwise preferences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Parameters;
use crate::policy::{Binding, ModelConfig, ModelError, PolicyModel};
use crate::seed;
use crate::task::PreferencePair;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("loss diverged at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Transformer backbone with a linear head on the last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub backbone: PolicyModel,
    /// [d_model, 1]
    pub head_w: Tensor,
    /// [1]
    pub head_b: Tensor,
}

impl RewardModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        Ok(Self::from_backbone(&PolicyModel::new(config)?))
    }

    /// Independent copy of `backbone` (adapters merged) with a zero head.
    /// All backbone weights train except the unused language-model head.
    pub fn from_backbone(backbone: &PolicyModel) -> Self {
        let mut b = backbone.merged();
        b.unfreeze_all();
        b.zero_grads();
        if let Some(h) = b.weight_mut("head") {
            h.requires_grad = false;
        }
        let d = b.config.d_model;
        Self {
            backbone: b,
            head_w: Tensor::zeros(&[d, 1]).with_requires_grad(true),
            head_b: Tensor::zeros(&[1]).with_requires_grad(true),
        }
    }

    pub fn heads(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("reward.w".to_string(), self.head_w.clone()),
            ("reward.b".to_string(), self.head_b.clone()),
        ])
    }

    pub fn from_parts(backbone: PolicyModel, heads: &BTreeMap<String, Tensor>) -> Result<Self, ModelError> {
        let get = |k: &str| {
            heads
                .get(k)
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint(format!("missing {k}")))
        };
        let (w, b) = (get("reward.w")?, get("reward.b")?);
        if w.shape() != [backbone.config.d_model, 1] || b.shape() != [1] {
            return Err(ModelError::Checkpoint("reward head shape mismatch".into()));
        }
        Ok(Self {
            backbone,
            head_w: w,
            head_b: b,
        })
    }

    fn bind_head(&self, g: &mut Graph, track: bool) -> (Var, Var) {
        if track {
            (g.leaf(&self.head_w), g.leaf(&self.head_b))
        } else {
            (g.constant(self.head_w.clone()), g.constant(self.head_b.clone()))
        }
    }

    fn score(
        &self,
        g: &mut Graph,
        b: &Binding,
        head: (Var, Var),
        prompt: &[usize],
        response: &[usize],
    ) -> Result<Var, ModelError> {
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(response);
        let h = self.backbone.hidden_states(g, b, &seq)?;
        let last = g.slice_rows(h, seq.len() - 1, 1)?;
        let r = g.matmul(last, head.0)?;
        let r = g.add(r, head.1)?;
        Ok(g.sum(r))
    }

    pub fn reward(&self, prompt: &[usize], response: &[usize]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let b = self.backbone.bind(&mut g, false);
        let head = self.bind_head(&mut g, false);
        let r = self.score(&mut g, &b, head, prompt, response)?;
        Ok(g.value(r).item())
    }

    fn pair_graph(&self, g: &mut Graph, pair: &PreferencePair, track: bool) -> Result<(Binding, (Var, Var), Var), ModelError> {
        let b = self.backbone.bind(g, track);
        let head = self.bind_head(g, track);
        let rw = self.score(g, &b, head, &pair.prompt, &pair.chosen)?;
        let rl = self.score(g, &b, head, &pair.prompt, &pair.rejected)?;
        Ok((b, head, bt_loss_graph(g, rw, rl)?))
    }

    pub fn bt_loss(&self, pair: &PreferencePair) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let (_, _, l) = self.pair_graph(&mut g, pair, false)?;
        Ok(g.value(l).item())
    }

    fn accumulate(&mut self, pair: &PreferencePair, weight: f64) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let (b, head, l) = self.pair_graph(&mut g, pair, true)?;
        let l = g.scale(l, weight);
        let grads = g.backward(l)?;
        self.backbone.accumulate_grads(&b, &grads);
        if let Some(gw) = grads.get(head.0) {
            self.head_w.accumulate_grad(gw);
        }
        if let Some(gb) = grads.get(head.1) {
            self.head_b.accumulate_grad(gb);
        }
        Ok(g.value(l).item() / weight)
    }
}

impl Parameters for RewardModel {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.for_each_param(f);
        f("reward.w", &self.head_w);
        f("reward.b", &self.head_b);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.for_each_param_mut(f);
        f("reward.w", &mut self.head_w);
        f("reward.b", &mut self.head_b);
    }
}

/// −log σ(r_w − r_l) on the graph.
pub fn bt_loss_graph(g: &mut Graph, rw: Var, rl: Var) -> Result<Var, ModelError> {
    let m = g.sub(rw, rl)?;
    let ls = g.log_sigmoid(m);
    Ok(g.scale(ls, -1.0))
}

/// −log σ(r_w − r_l) for plain numbers.
pub fn bt_loss_value(rw: f64, rl: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(rw));
    let b = g.constant(Tensor::scalar(rl));
    let l = bt_loss_graph(&mut g, a, b).expect("scalar shapes");
    g.value(l).item()
}

/// Fraction of (chosen, rejected) reward pairs ordered correctly; ties count half.
pub fn accuracy_from_rewards(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let s: f64 = pairs
        .iter()
        .map(|(w, l)| if w > l { 1.0 } else if w == l { 0.5 } else { 0.0 })
        .sum();
    s / pairs.len() as f64
}

pub fn preference_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<f64, RewardError> {
    if pairs.is_empty() {
        return Err(RewardError::Contract("no pairs".into()));
    }
    let rs = pairs
        .iter()
        .map(|p| Ok((rm.reward(&p.prompt, &p.chosen)?, rm.reward(&p.prompt, &p.rejected)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(accuracy_from_rewards(&rs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            epochs: 3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmEval {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmReport {
    pub curve: Vec<RmEval>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

/// Bradley–Terry training; keeps the weights with the best validation
/// preference accuracy (earliest on ties).
pub fn train_rm(
    rm: &mut RewardModel,
    train: &[PreferencePair],
    val: &[PreferencePair],
    cfg: &RmConfig,
) -> Result<RmReport, RewardError> {
    if train.len() + val.len() < 2 || train.is_empty() || val.is_empty() {
        return Err(RewardError::Contract("need nonempty train and validation pairs".into()));
    }
    let bs = cfg.batch_size.max(1);
    let total = train.len().div_ceil(bs) * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), total);
    let mut rng = seed::rng(cfg.seed, "rm-shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = RmReport {
        curve: Vec::new(),
        best_val_accuracy: preference_accuracy(rm, val)?,
        best_epoch: 0,
    };
    let mut best = rm.clone();
    rm.zero_grads();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let w = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += rm.accumulate(&train[i], w)? * w;
            }
            if !loss.is_finite() {
                return Err(RewardError::Divergence { step: opt.step_count() });
            }
            opt.step(rm);
            epoch_loss += loss * chunk.len() as f64;
        }
        let acc = preference_accuracy(rm, val)?;
        report.curve.push(RmEval {
            epoch,
            step: opt.step_count(),
            train_loss: epoch_loss / train.len() as f64,
            val_accuracy: acc,
        });
        if acc > report.best_val_accuracy {
            report.best_val_accuracy = acc;
            report.best_epoch = epoch;
            best = rm.clone();
        }
    }
    *rm = best;
    rm.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 1,
            max_seq_len: 12,
            seed: 0,
        }
    }

    fn pair() -> PreferencePair {
        PreferencePair {
            prompt: vec![1, 2],
            chosen: vec![4, 5, 3],
            rejected: vec![6, 3],
            problem: 0,
            loser_kind: None,
        }
    }

    #[test]
    fn zero_head_goldens() {
        let rm = RewardModel::new(tiny()).unwrap();
        assert_eq!(rm.reward(&[1], &[2, 3]).unwrap(), 0.0);
        assert!((rm.bt_loss(&pair()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(preference_accuracy(&rm, &[pair()]).unwrap(), 0.5);
    }

    #[test]
    fn bt_values() {
        assert!((bt_loss_value(20.0, 0.0) - 2.061_153_6e-9).abs() < 1e-15);
        assert_eq!(bt_loss_value(3.0, 1.0), bt_loss_value(8.0, 6.0));
        let l = bt_loss_value(1.3, 0.2);
        let l2 = bt_loss_value(0.2, 1.3);
        assert!(((-l).exp() + (-l2).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_counts_ties_half() {
        assert_eq!(accuracy_from_rewards(&[(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (2.0, 1.0)]), 0.625);
    }
}
