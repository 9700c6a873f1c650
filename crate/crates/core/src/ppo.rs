//! KL-shaped PPO over the trainable subset of a policy, with a value head
//! reading detached policy features.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::Parameters;
use crate::policy::{ModelError, PolicyModel};
use crate::reward::RewardModel;
use crate::seed;
use crate::task::vocab::EOS;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite ratio at trajectory {trajectory}, token {token}")]
    NonFiniteRatio { trajectory: usize, token: usize },
    #[error("no usable trajectories in rollout")]
    EmptyRollout,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub rollout_prompts: usize,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub value_coeff: f64,
    pub entropy_coeff: f64,
    /// Expected per-trajectory KL to the reference; a run stops once the
    /// mean exceeds `kl_cap_factor` times this.
    pub kl_target: f64,
    pub kl_cap_factor: f64,
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    /// Learning rate of the value head, which has its own optimizer.
    pub value_lr: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_coeff: 0.02,
            rollout_prompts: 64,
            ppo_epochs: 2,
            minibatch_size: 64,
            gamma: 1.0,
            gae_lambda: 0.95,
            max_new_tokens: 128,
            temperature: 1.0,
            value_coeff: 0.5,
            entropy_coeff: 0.0,
            kl_target: 1.0,
            kl_cap_factor: 10.0,
            iterations: 30,
            optimizer: AdamWConfig {
                lr: 3e-4,
                weight_decay: 0.0,
                ..Default::default()
            },
            value_lr: 1e-2,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff must be non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma and gae_lambda must lie in (0, 1]");
        }
        if !(1..=4).contains(&self.ppo_epochs) {
            return bad("ppo_epochs must be between 1 and 4");
        }
        if self.rollout_prompts == 0 || self.minibatch_size == 0 || self.max_new_tokens == 0 {
            return bad("rollout_prompts, minibatch_size and max_new_tokens must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("rollout temperature must be positive");
        }
        Ok(())
    }
}

/// Terminal reward source for rollouts.
pub trait Scorer {
    fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64, ModelError>;
}

impl Scorer for RewardModel {
    fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64, ModelError> {
        self.reward(prompt, response)
    }
}

impl<F: Fn(&[usize], &[usize]) -> f64> Scorer for F {
    fn score(&self, prompt: &[usize], response: &[usize]) -> Result<f64, ModelError> {
        Ok(self(prompt, response))
    }
}

/// Policy plus the value head trained alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub policy: PolicyModel,
    /// [d_model, 1]
    pub value_w: Tensor,
    /// [1]
    pub value_b: Tensor,
}

impl ActorCritic {
    pub fn new(policy: PolicyModel) -> Self {
        let d = policy.config.d_model;
        Self {
            policy,
            value_w: Tensor::zeros(&[d, 1]).with_requires_grad(true),
            value_b: Tensor::zeros(&[1]).with_requires_grad(true),
        }
    }

    pub fn heads(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("value.w".to_string(), self.value_w.clone()),
            ("value.b".to_string(), self.value_b.clone()),
        ])
    }
}

/// The value head alone, for its separate optimizer.
struct ValueParams<'a>(&'a mut Tensor, &'a mut Tensor);

impl Parameters for ValueParams<'_> {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("value.w", self.0);
        f("value.b", self.1);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("value.w", self.0);
        f("value.b", self.1);
    }
}

impl Parameters for ActorCritic {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.policy.for_each_param(f);
        f("value.w", &self.value_w);
        f("value.b", &self.value_b);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.policy.for_each_param_mut(f);
        f("value.w", &mut self.value_w);
        f("value.b", &mut self.value_b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    pub raw_reward: f64,
    pub reward: f64,
    /// −β(log π − log π_ref) per token, standardized reward added on the last.
    pub shaped: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn kl(&self) -> f64 {
        self.old_log_probs.iter().zip(&self.ref_log_probs).map(|(a, b)| a - b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub dropped: usize,
}

/// Generalized advantage estimation with V after the last token fixed at 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_v = 0.0;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_v - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
        next_v = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Per-token KL shaping; the terminal reward lands on the last token.
pub fn shape_rewards(old: &[f64], reference: &[f64], beta: f64, terminal: f64) -> Vec<f64> {
    let mut r: Vec<f64> = old.iter().zip(reference).map(|(o, rf)| -beta * (o - rf)).collect();
    if let Some(last) = r.last_mut() {
        *last += terminal;
    }
    r
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    xs.iter().map(|x| (x - mean) / (sd + 1e-8)).collect()
}

fn values_of(ac: &ActorCritic, prompt: &[usize], response: &[usize]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut g = Graph::new();
    let b = ac.policy.bind(&mut g, false);
    let fwd = ac.policy.forward_response(&mut g, &b, prompt, response)?;
    let w = g.constant(ac.value_w.clone());
    let bias = g.constant(ac.value_b.clone());
    let v = g.matmul(fwd.hidden, w)?;
    let v = g.add(v, bias)?;
    Ok((g.value(fwd.log_probs).data().to_vec(), g.value(v).data().to_vec()))
}

/// Samples one response per prompt and fills rewards, values and advantages.
pub fn collect_rollouts<R: Rng + ?Sized>(
    ac: &ActorCritic,
    reference: &PolicyModel,
    rm: &dyn Scorer,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<RolloutBatch, PpoError> {
    let mut kept = Vec::new();
    let mut dropped = 0;
    for p in prompts {
        let s = ac.policy.sample(p, cfg.max_new_tokens, cfg.temperature, EOS, rng)?;
        if s.tokens.is_empty() || s.tokens == [EOS] {
            dropped += 1;
            continue;
        }
        let (old, values) = values_of(ac, p, &s.tokens)?;
        let rf = reference.log_prob(p, &s.tokens)?.per_token;
        let raw = rm.score(p, &s.tokens)?;
        kept.push(Trajectory {
            prompt: p.clone(),
            response: s.tokens,
            old_log_probs: old,
            ref_log_probs: rf,
            raw_reward: raw,
            reward: 0.0,
            shaped: Vec::new(),
            values,
            advantages: Vec::new(),
            returns: Vec::new(),
        });
    }
    if kept.is_empty() {
        return Err(PpoError::EmptyRollout);
    }
    let raw: Vec<f64> = kept.iter().map(|t| t.raw_reward).collect();
    for (t, r) in kept.iter_mut().zip(standardize(&raw)) {
        t.reward = r;
        t.shaped = shape_rewards(&t.old_log_probs, &t.ref_log_probs, cfg.kl_coeff, r);
        let (a, ret) = gae(&t.shaped, &t.values, cfg.gamma, cfg.gae_lambda);
        t.advantages = a;
        t.returns = ret;
    }
    Ok(RolloutBatch {
        trajectories: kept,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub max_ratio_dev: f64,
}

/// Builds the minibatch loss, backpropagates it into `ac`, and returns stats.
/// With `apply_grads` false only the forward values are computed.
pub fn ppo_loss(
    ac: &mut ActorCritic,
    minibatch: &[&Trajectory],
    cfg: &PpoConfig,
    apply_grads: bool,
) -> Result<LossStats, PpoError> {
    let all_adv: Vec<f64> = minibatch.iter().flat_map(|t| t.advantages.iter().copied()).collect();
    let n = all_adv.len();
    if n == 0 {
        return Err(PpoError::EmptyRollout);
    }
    let mean = all_adv.iter().sum::<f64>() / n as f64;
    let sd = (all_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let sd = sd.max(1e-8);
    let inv_n = 1.0 / n as f64;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let mut stats = LossStats::default();
    let mut clipped = 0usize;
    for (ti, t) in minibatch.iter().enumerate() {
        let mut g = Graph::new();
        let b = ac.policy.bind(&mut g, apply_grads);
        let vw = if apply_grads { g.leaf(&ac.value_w) } else { g.constant(ac.value_w.clone()) };
        let vb = if apply_grads { g.leaf(&ac.value_b) } else { g.constant(ac.value_b.clone()) };
        let fwd = ac.policy.forward_response(&mut g, &b, &t.prompt, &t.response)?;
        let r = t.response.len();
        let old = g.constant(Tensor::new(vec![r], t.old_log_probs.clone()).expect("len"));
        let adv: Vec<f64> = t.advantages.iter().map(|a| (a - mean) / sd).collect();
        let adv = g.constant(Tensor::new(vec![r], adv).expect("len"));
        let diff = g.sub(fwd.log_probs, old).map_err(ModelError::from)?;
        let ratio = g.exp(diff);
        for (k, &rho) in g.value(ratio).data().iter().enumerate() {
            if !rho.is_finite() {
                return Err(PpoError::NonFiniteRatio { trajectory: ti, token: k });
            }
            stats.max_ratio_dev = stats.max_ratio_dev.max((rho - 1.0).abs());
            if rho < lo || rho > hi {
                clipped += 1;
            }
        }
        let unclipped = g.mul(ratio, adv).map_err(ModelError::from)?;
        let cr = g.clamp(ratio, lo, hi);
        let clipped_term = g.mul(cr, adv).map_err(ModelError::from)?;
        let surr = g.minimum(unclipped, clipped_term).map_err(ModelError::from)?;
        let surr = g.sum(surr);
        let policy = g.scale(surr, -inv_n);

        let feats = g.detach(fwd.hidden);
        let v = g.matmul(feats, vw).map_err(ModelError::from)?;
        let v = g.add(v, vb).map_err(ModelError::from)?;
        let ret = g.constant(Tensor::new(vec![r, 1], t.returns.clone()).expect("len"));
        let err = g.sub(v, ret).map_err(ModelError::from)?;
        let sq = g.mul(err, err).map_err(ModelError::from)?;
        let sq = g.sum(sq);
        let vloss = g.scale(sq, inv_n);

        let probs = g.softmax(fwd.logits);
        let plogp = g.mul(probs, fwd.log_softmax).map_err(ModelError::from)?;
        let negent = g.sum(plogp);
        let ent = g.scale(negent, -inv_n);

        let vterm = g.scale(vloss, cfg.value_coeff);
        let eterm = g.scale(ent, -cfg.entropy_coeff);
        let loss = g.add(policy, vterm).map_err(ModelError::from)?;
        let loss = g.add(loss, eterm).map_err(ModelError::from)?;

        stats.policy_loss += g.value(policy).item();
        stats.value_loss += g.value(vloss).item();
        stats.entropy += g.value(ent).item();
        stats.loss += g.value(loss).item();
        if apply_grads {
            let grads = g.backward(loss).map_err(ModelError::from)?;
            ac.policy.accumulate_grads(&b, &grads);
            if ac.value_w.requires_grad {
                if let Some(gw) = grads.get(vw) {
                    ac.value_w.accumulate_grad(gw);
                }
            }
            if ac.value_b.requires_grad {
                if let Some(gb) = grads.get(vb) {
                    ac.value_b.accumulate_grad(gb);
                }
            }
        }
    }
    stats.clip_frac = clipped as f64 / n as f64;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationStats {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub dropped: usize,
    /// max |ρ − 1| on the first minibatch, before any step in the iteration.
    pub first_ratio_dev: f64,
    pub first_clip_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum PpoStatus {
    Completed,
    KlCapExceeded { iter: usize, mean_kl: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpoReport {
    pub iterations: Vec<IterationStats>,
    pub status: PpoStatus,
}

impl PpoReport {
    /// One row per iteration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,mean_reward,mean_kl,clip_frac,entropy,value_loss\n");
        for i in &self.iterations {
            s += &format!(
                "{},{},{},{},{},{}\n",
                i.iter, i.mean_reward, i.mean_kl, i.clip_frac, i.entropy, i.value_loss
            );
        }
        s
    }
}

/// Rollout / optimize loop. Each iteration draws `rollout_prompts` prompts
/// with replacement from `prompts`.
pub fn ppo_update(
    ac: &mut ActorCritic,
    reference: &PolicyModel,
    rm: &dyn Scorer,
    prompts: &[Vec<usize>],
    cfg: &PpoConfig,
) -> Result<PpoReport, PpoError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(PpoError::Config("no prompts".into()));
    }
    let mb = cfg.minibatch_size;
    let per_iter = cfg.rollout_prompts.div_ceil(mb) * cfg.ppo_epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), per_iter * cfg.iterations);
    let mut vopt = AdamW::new(
        AdamWConfig {
            lr: cfg.value_lr,
            ..cfg.optimizer.clone()
        },
        per_iter * cfg.iterations,
    );
    let mut rng = seed::rng(cfg.seed, "ppo");
    let mut report = PpoReport {
        iterations: Vec::new(),
        status: PpoStatus::Completed,
    };
    ac.zero_grads();
    for iter in 0..cfg.iterations {
        let chosen: Vec<Vec<usize>> = (0..cfg.rollout_prompts)
            .map(|_| prompts.choose(&mut rng).expect("nonempty").clone())
            .collect();
        let batch = collect_rollouts(ac, reference, rm, &chosen, cfg, &mut rng)?;
        let trajs = &batch.trajectories;
        let k = trajs.len() as f64;
        let mut it = IterationStats {
            iter,
            mean_reward: trajs.iter().map(|t| t.raw_reward).sum::<f64>() / k,
            mean_kl: trajs.iter().map(Trajectory::kl).sum::<f64>() / k,
            clip_frac: 0.0,
            entropy: 0.0,
            value_loss: 0.0,
            dropped: batch.dropped,
            first_ratio_dev: 0.0,
            first_clip_frac: 0.0,
        };
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        let mut n_mb = 0;
        for epoch in 0..cfg.ppo_epochs {
            order.shuffle(&mut rng);
            for (ci, chunk) in order.chunks(mb).enumerate() {
                let mbatch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
                let s = ppo_loss(ac, &mbatch, cfg, true)?;
                if epoch == 0 && ci == 0 {
                    it.first_ratio_dev = s.max_ratio_dev;
                    it.first_clip_frac = s.clip_frac;
                }
                it.clip_frac += s.clip_frac;
                it.entropy += s.entropy;
                it.value_loss += s.value_loss;
                n_mb += 1;
                opt.step(&mut ac.policy);
                vopt.step(&mut ValueParams(&mut ac.value_w, &mut ac.value_b));
            }
        }
        it.clip_frac /= n_mb as f64;
        it.entropy /= n_mb as f64;
        it.value_loss /= n_mb as f64;
        let kl = it.mean_kl;
        report.iterations.push(it);
        if kl > cfg.kl_target * cfg.kl_cap_factor {
            report.status = PpoStatus::KlCapExceeded { iter, mean_kl: kl };
            break;
        }
    }
    ac.zero_grads();
    Ok(report)
}

/// Exact per-position KL(π ‖ π_ref) over the full vocabulary.
pub fn exact_kl(
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompt: &[usize],
    response: &[usize],
) -> Result<Vec<f64>, ModelError> {
    let table = |m: &PolicyModel| -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let f = m.forward_response(&mut g, &b, prompt, response)?;
        Ok(g.value(f.log_softmax).clone())
    };
    let (p, q) = (table(policy)?, table(reference)?);
    Ok((0..p.rows())
        .map(|r| {
            p.row(r)
                .iter()
                .zip(q.row(r))
                .map(|(lp, lq)| lp.exp() * (lp - lq))
                .sum()
        })
        .collect())
}
