//! Supervised fine-tuning on demonstrations with teacher forcing.


use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Parameters;
use crate::policy::{Binding, ModelError, PolicyModel};
use crate::seed;
use crate::task::Demonstration;

#[derive(Debug, Error)]
pub enum SftError {
    #[error("example {index}: {source}")]
    Example {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("loss diverged at step {step}")]
    Divergence { step: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps between validation evaluations; 0 evaluates once per epoch.
    pub eval_every: usize,
    pub patience: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            epochs: 10,
            batch_size: 8,
            eval_every: 0,
            patience: 3,
            label_smoothing: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SftReport {
    pub losses: Vec<LossRow>,
    /// (step, validation per-token NLL)
    pub val_curve: Vec<(usize, f64)>,
    pub best_step: usize,
    pub stopped_early: bool,
}

impl SftReport {
    /// `step,loss,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.losses {
            s += &format!("{},{},{}\n", r.step, r.loss, r.lr);
        }
        s
    }
}

fn example_nll(
    model: &PolicyModel,
    g: &mut Graph,
    b: &Binding,
    d: &Demonstration,
    smoothing: f64,
) -> Result<Var, ModelError> {
    let fwd = model.forward_response(g, b, &d.prompt, &d.target)?;
    let nll = g.sum(fwd.log_probs);
    let nll = g.scale(nll, -1.0);
    if smoothing == 0.0 {
        return Ok(nll);
    }
    let all = g.sum(fwd.log_softmax);
    let uniform = g.scale(all, -1.0 / model.config.vocab_size as f64);
    let a = g.scale(nll, 1.0 - smoothing);
    let u = g.scale(uniform, smoothing);
    Ok(g.add(a, u)?)
}

/// Teacher-forcing NLL over target tokens only, averaged per target token
/// across the whole batch.
pub fn sft_loss(model: &PolicyModel, batch: &[Demonstration]) -> Result<f64, SftError> {
    if batch.is_empty() {
        return Err(SftError::Contract("empty batch".into()));
    }
    let tokens: usize = batch.iter().map(|d| d.target.len()).sum();
    let mut total = 0.0;
    for (i, d) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let v = example_nll(model, &mut g, &b, d, 0.0).map_err(|e| SftError::Example { index: i, source: e })?;
        total += g.value(v).item();
    }
    Ok(total / tokens as f64)
}

/// Accumulates gradients of the batch loss into the model and returns the loss.
pub fn sft_backward(model: &mut PolicyModel, batch: &[Demonstration], smoothing: f64) -> Result<f64, SftError> {
    if batch.is_empty() {
        return Err(SftError::Contract("empty batch".into()));
    }
    let tokens: usize = batch.iter().map(|d| d.target.len()).sum();
    let mut total = 0.0;
    for (i, d) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let v = example_nll(model, &mut g, &b, d, smoothing).map_err(|e| SftError::Example { index: i, source: e })?;
        let loss = g.scale(v, 1.0 / tokens as f64);
        total += g.value(loss).item();
        let grads = g.backward(loss).map_err(ModelError::from)?;
        model.accumulate_grads(&b, &grads);
    }
    Ok(total)
}

/// Mini-batch AdamW over shuffled epochs with early stopping on validation
/// NLL. The model ends holding the best-validation weights.
pub fn train_sft(
    model: &mut PolicyModel,
    train: &[Demonstration],
    val: &[Demonstration],
    cfg: &SftConfig,
) -> Result<SftReport, SftError> {
    if train.is_empty() {
        return Err(SftError::Contract("empty training set".into()));
    }
    if model.trainable_count() == 0 {
        return Err(SftError::Contract("model has no trainable parameters".into()));
    }
    let bs = cfg.batch_size.max(1);
    let per_epoch = train.len().div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let eval_every = if cfg.eval_every == 0 { per_epoch } else { cfg.eval_every };
    let mut opt = AdamW::new(cfg.optimizer.clone(), total);
    let mut rng = seed::rng(cfg.seed, "sft-shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = SftReport {
        losses: Vec::with_capacity(total),
        val_curve: Vec::new(),
        best_step: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, PolicyModel)> = None;
    let mut bad_evals = 0;
    model.zero_grads();
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<Demonstration> = chunk.iter().map(|&i| train[i].clone()).collect();
            let lr = opt.current_lr();
            let loss = sft_backward(model, &batch, cfg.label_smoothing)?;
            let step = opt.step_count();
            if !loss.is_finite() {
                return Err(SftError::Divergence { step });
            }
            opt.step(model);
            report.losses.push(LossRow { step, loss, lr });
            let done = opt.step_count();
            if !val.is_empty() && done % eval_every == 0 {
                let v = sft_loss(model, val)?;
                report.val_curve.push((done, v));
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, model.clone()));
                    report.best_step = done;
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                    if bad_evals >= cfg.patience.max(1) {
                        report.stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
    }
    match best {
        Some((_, m)) => *model = m,
        None => report.best_step = opt.step_count(),
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LayerSelection, ModelConfig};

    fn cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            n_layers: 2,
            max_seq_len: 16,
            seed: 0,
        }
    }

    fn demo(p: &[usize], t: &[usize]) -> Demonstration {
        Demonstration {
            prompt: p.to_vec(),
            target: t.to_vec(),
        }
    }

    #[test]
    fn uniform_head_gives_ln_vocab() {
        let mut m = PolicyModel::new(cfg(16)).unwrap();
        m.zero_head();
        let batch = vec![demo(&[1, 2], &[3, 4, 5, 6]), demo(&[7], &[8, 9, 10, 11, 12, 13])];
        let l = sft_loss(&m, &batch).unwrap();
        assert!((l - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_log_prob_and_ignores_order() {
        let m = PolicyModel::new(cfg(16)).unwrap();
        let batch = vec![demo(&[1, 2], &[3, 4]), demo(&[7, 1, 1], &[8, 9, 10])];
        let lp: f64 = batch.iter().map(|d| m.log_prob(&d.prompt, &d.target).unwrap().sum).sum();
        let l = sft_loss(&m, &batch).unwrap();
        assert!((l + lp / 5.0).abs() < 1e-12);
        let rev: Vec<_> = batch.iter().rev().cloned().collect();
        assert!((sft_loss(&m, &rev).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn overlong_example_is_named() {
        let m = PolicyModel::new(cfg(16)).unwrap();
        let batch = vec![demo(&[1], &[2]), demo(&[1; 10], &[2; 10])];
        match sft_loss(&m, &batch) {
            Err(SftError::Example { index, source: ModelError::Length { .. } }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_batch_loss_does_not_increase() {
        let mut m = PolicyModel::new(cfg(16)).unwrap();
        m.attach_lora(&LayerSelection::all(2), 2, 2.0).unwrap();
        let data = vec![
            demo(&[1, 2], &[3, 4, 5]),
            demo(&[1, 6], &[7, 8, 5]),
            demo(&[1, 9], &[3, 10, 5]),
            demo(&[1, 11], &[12, 4, 5]),
        ];
        let c = SftConfig {
            optimizer: AdamWConfig { lr: 1e-3, warmup_frac: 0.0, weight_decay: 0.0, ..Default::default() },
            epochs: 30,
            batch_size: 4,
            ..Default::default()
        };
        let r = train_sft(&mut m, &data, &[], &c).unwrap();
        for w in r.losses.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-12, "{} -> {}", w[0].loss, w[1].loss);
        }
    }
}
