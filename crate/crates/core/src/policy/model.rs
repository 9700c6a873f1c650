use std::collections::BTreeMap;

use rand::Rng;

use super::lora::{LayerSelection, LoraAdapter, TargetKind};
use super::{ModelConfig, ModelError};
use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::params::Parameters;
use crate::seed;

type Result<T> = std::result::Result<T, ModelError>;

/// Decoder-only transformer with pre-norm blocks, learned absolute
/// positions, multi-head causal attention and a gated GELU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: ModelConfig,
    weights: BTreeMap<String, Tensor>,
    adapters: Vec<LoraAdapter>,
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    base: BTreeMap<String, Var>,
    adapters: BTreeMap<String, (Var, Var, f64)>,
}

impl Binding {
    pub fn weight(&self, name: &str) -> Var {
        self.base[name]
    }

    /// Substitutes a weight (used by gradient checks to differentiate
    /// with respect to a single tensor).
    pub fn replace(&mut self, name: &str, v: Var) {
        *self.base.get_mut(name).expect("unknown weight") = v;
    }

    /// Substitutes the A (`r × k`) and/or B (`d × r`) factor of an adapter.
    pub fn replace_adapter(&mut self, target: &str, a: Option<Var>, b: Option<Var>) {
        let slot = self.adapters.get_mut(target).expect("unknown adapter");
        if let Some(a) = a {
            slot.0 = a;
        }
        if let Some(b) = b {
            slot.1 = b;
        }
    }
}

/// Outputs at the states where each response token is chosen.
#[derive(Debug, Clone, Copy)]
pub struct ResponseForward {
    /// [R, vocab]
    pub logits: Var,
    /// [R, vocab]
    pub log_softmax: Var,
    /// [R]
    pub log_probs: Var,
    /// [R, d_model]
    pub hidden: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub per_token: Vec<f64>,
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Temperature-1 log-probabilities of each sampled token.
    pub log_probs: Vec<f64>,
}

impl PolicyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "policy-init");
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let mut w = BTreeMap::new();
        let mut put = |name: String, t: Tensor| {
            w.insert(name, t.with_requires_grad(true));
        };
        put("tok_emb".into(), Tensor::randn(&[v, d], 0.5, &mut rng));
        put("pos_emb".into(), Tensor::randn(&[config.max_seq_len, d], 0.1, &mut rng));
        for i in 0..config.n_layers {
            put(format!("blocks.{i}.ln1.gain"), Tensor::full(&[d], 1.0));
            put(format!("blocks.{i}.ln1.bias"), Tensor::zeros(&[d]));
            for k in [TargetKind::Q, TargetKind::K, TargetKind::V] {
                put(k.weight_name(i), Tensor::randn(&[d, d], proj_std, &mut rng));
            }
            put(TargetKind::O.weight_name(i), Tensor::randn(&[d, d], resid_std, &mut rng));
            put(format!("blocks.{i}.ln2.gain"), Tensor::full(&[d], 1.0));
            put(format!("blocks.{i}.ln2.bias"), Tensor::zeros(&[d]));
            put(TargetKind::Up.weight_name(i), Tensor::randn(&[d, f], proj_std, &mut rng));
            put(TargetKind::Gate.weight_name(i), Tensor::randn(&[d, f], proj_std, &mut rng));
            let down_std = resid_std * (d as f64 / f as f64).sqrt();
            put(TargetKind::Down.weight_name(i), Tensor::randn(&[f, d], down_std, &mut rng));
        }
        put("ln_f.gain".into(), Tensor::full(&[d], 1.0));
        put("ln_f.bias".into(), Tensor::zeros(&[d]));
        put("head".into(), Tensor::randn(&[d, v], proj_std, &mut rng));
        Ok(Self {
            config,
            weights: w,
            adapters: Vec::new(),
        })
    }

    /// Rebuilds a model from stored parts, checking every expected weight.
    pub fn from_parts(
        config: ModelConfig,
        weights: BTreeMap<String, Tensor>,
        adapters: Vec<LoraAdapter>,
    ) -> Result<Self> {
        let template = Self::new(config.clone())?;
        for (name, t) in &template.weights {
            match weights.get(name) {
                Some(w) if w.shape() == t.shape() => {}
                Some(w) => {
                    return Err(ModelError::Config(format!(
                        "weight {name} has shape {:?}, expected {:?}",
                        w.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Config(format!("missing weight {name}"))),
            }
        }
        if weights.len() != template.weights.len() {
            return Err(ModelError::Config("unexpected extra weights".into()));
        }
        let mut m = Self {
            config,
            weights,
            adapters: Vec::new(),
        };
        for a in adapters {
            m.check_adapter_target(&a)?;
            m.adapters.push(a);
        }
        Ok(m)
    }

    fn check_adapter_target(&self, a: &LoraAdapter) -> Result<()> {
        let w = self
            .weights
            .get(&a.target)
            .ok_or_else(|| ModelError::Config(format!("adapter targets unknown weight {}", a.target)))?;
        if self.adapters.iter().any(|x| x.target == a.target) {
            return Err(ModelError::Config(format!("duplicate adapter on {}", a.target)));
        }
        let (d, k) = (w.shape()[0], w.shape()[1]);
        if a.b.shape() != [d, a.rank] || a.a.shape() != [a.rank, k] {
            return Err(ModelError::Config(format!("adapter shapes do not fit {}", a.target)));
        }
        Ok(())
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.weights.get_mut(name)
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.weights.get(name).map(|t| !t.requires_grad)
    }

    /// Sets the output head to zero so every position predicts uniformly.
    pub fn zero_head(&mut self) {
        let h = self.weights.get_mut("head").expect("head");
        h.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Freezes base weights and installs zero-initialized adapters on the
    /// selected projections.
    pub fn attach_lora(&mut self, selection: &LayerSelection, rank: usize, alpha: f64) -> Result<()> {
        selection.validate(self.config.n_layers)?;
        let targets = selection.targets();
        for t in &targets {
            if self.adapters.iter().any(|a| &a.target == t) {
                return Err(ModelError::Config(format!("duplicate adapter on {t}")));
            }
        }
        for t in &targets {
            let w = &self.weights[t];
            let (d, k) = (w.shape()[0], w.shape()[1]);
            let mut rng = seed::rng(self.config.seed, &format!("lora:{t}"));
            self.adapters.push(LoraAdapter::new(t.clone(), d, k, rank, alpha, &mut rng)?);
        }
        self.weights.values_mut().for_each(|w| w.requires_grad = false);
        Ok(())
    }

    /// Full-parameter mode: every base weight becomes trainable.
    pub fn unfreeze_all(&mut self) {
        self.weights.values_mut().for_each(|w| w.requires_grad = true);
    }

    pub fn freeze_all(&mut self) {
        self.for_each_param_mut(&mut |_, t| t.requires_grad = false);
    }

    /// Deep copy with gradient tracking disabled everywhere.
    pub fn clone_frozen(&self) -> Self {
        let mut c = self.clone();
        c.freeze_all();
        c.zero_grads();
        c
    }

    /// Folds adapters into their base weights, returning a plain model.
    pub fn merged(&self) -> Self {
        let mut m = self.clone();
        for a in &self.adapters {
            let delta = a.delta();
            let w = m.weights.get_mut(&a.target).expect("adapter target");
            w.data_mut().iter_mut().zip(delta.data()).for_each(|(x, d)| *x += d);
        }
        m.adapters.clear();
        m
    }

    /// Places every tensor on the graph; gradients are tracked per tensor
    /// flag when `track` is set, and never otherwise.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Binding {
        let mut leaf = |t: &Tensor| {
            if track {
                g.leaf(t)
            } else {
                g.constant(t.clone())
            }
        };
        let base = self
            .weights
            .iter()
            .map(|(k, t)| (k.clone(), leaf(t)))
            .collect();
        let adapters = self
            .adapters
            .iter()
            .map(|a| (a.target.clone(), (leaf(&a.a), leaf(&a.b), a.scaling())))
            .collect();
        Binding { base, adapters }
    }

    fn linear(&self, g: &mut Graph, b: &Binding, x: Var, name: &str) -> Result<Var> {
        let mut y = g.matmul(x, b.weight(name))?;
        if let Some(&(a, bm, s)) = b.adapters.get(name) {
            let xb = g.matmul(x, bm)?;
            let delta = g.matmul(xb, a)?;
            let delta = g.scale(delta, s);
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::Vocabulary {
                token: t,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Final-norm hidden states, [len, d_model].
    pub fn hidden_states(&self, g: &mut Graph, b: &Binding, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let t = tokens.len();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.embedding(b.weight("tok_emb"), tokens)?;
        let pos = g.embedding(b.weight("pos_emb"), &positions)?;
        let mut h = g.add(tok, pos)?;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for i in 0..cfg.n_layers {
            let a = g.layer_norm(
                h,
                b.weight(&format!("blocks.{i}.ln1.gain")),
                b.weight(&format!("blocks.{i}.ln1.bias")),
            )?;
            let q = self.linear(g, b, a, &TargetKind::Q.weight_name(i))?;
            let k = self.linear(g, b, a, &TargetKind::K.weight_name(i))?;
            let v = self.linear(g, b, a, &TargetKind::V.weight_name(i))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh)?;
                let s = g.matmul(qh, kt)?;
                let s = g.scale(s, inv_sqrt);
                let s = g.causal_mask(s)?;
                let p = g.softmax(s);
                heads.push(g.matmul(p, vh)?);
            }
            let cat = g.concat(&heads)?;
            let o = self.linear(g, b, cat, &TargetKind::O.weight_name(i))?;
            h = g.add(h, o)?;
            let f = g.layer_norm(
                h,
                b.weight(&format!("blocks.{i}.ln2.gain")),
                b.weight(&format!("blocks.{i}.ln2.bias")),
            )?;
            let up = self.linear(g, b, f, &TargetKind::Up.weight_name(i))?;
            let gate = self.linear(g, b, f, &TargetKind::Gate.weight_name(i))?;
            let gate = g.gelu(gate);
            let m = g.mul(gate, up)?;
            let down = self.linear(g, b, m, &TargetKind::Down.weight_name(i))?;
            h = g.add(h, down)?;
        }
        Ok(g.layer_norm(h, b.weight("ln_f.gain"), b.weight("ln_f.bias"))?)
    }

    pub fn head_logits(&self, g: &mut Graph, b: &Binding, hidden: Var) -> Result<Var> {
        Ok(g.matmul(hidden, b.weight("head"))?)
    }

    /// Next-token logits for every position, [len, vocab].
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let h = self.hidden_states(&mut g, &b, tokens)?;
        let l = self.head_logits(&mut g, &b, h)?;
        Ok(g.value(l).clone())
    }

    fn last_logits(&self, g: &mut Graph, b: &Binding, tokens: &[usize]) -> Result<Vec<f64>> {
        let h = self.hidden_states(g, b, tokens)?;
        let last = g.slice_rows(h, tokens.len() - 1, 1)?;
        let l = self.head_logits(g, b, last)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Teacher-forced pass over `prompt ++ response`, returning the rows
    /// at which each response token is predicted.
    pub fn forward_response(
        &self,
        g: &mut Graph,
        b: &Binding,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<ResponseForward> {
        if prompt.is_empty() {
            return Err(ModelError::Contract("empty prompt".into()));
        }
        if response.is_empty() {
            return Err(ModelError::Contract("empty response".into()));
        }
        let total = prompt.len() + response.len();
        if total > self.config.max_seq_len {
            return Err(ModelError::Length {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        self.check_tokens(response)?;
        let mut input = prompt.to_vec();
        input.extend_from_slice(&response[..response.len() - 1]);
        let h = self.hidden_states(g, b, &input)?;
        let hidden = g.slice_rows(h, prompt.len() - 1, response.len())?;
        let logits = self.head_logits(g, b, hidden)?;
        let log_softmax = g.log_softmax(logits);
        let log_probs = g.pick(log_softmax, response)?;
        Ok(ResponseForward {
            logits,
            log_softmax,
            log_probs,
            hidden,
        })
    }

    /// Per-token log π(response_t | prompt, response_<t) and their sum.
    pub fn log_prob(&self, prompt: &[usize], response: &[usize]) -> Result<LogProbs> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let fwd = self.forward_response(&mut g, &b, prompt, response)?;
        let per_token = g.value(fwd.log_probs).data().to_vec();
        let sum = per_token.iter().sum();
        Ok(LogProbs { per_token, sum })
    }

    /// Autoregressive sampling. Temperature 0 is greedy with ties going to
    /// the lowest token id. Stops after `eos`, after `max_new` tokens, or
    /// at the context limit.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prompt: &[usize],
        max_new: usize,
        temperature: f64,
        eos: usize,
        rng: &mut R,
    ) -> Result<Sample> {
        if !(temperature >= 0.0) {
            return Err(ModelError::Contract(format!("temperature {temperature} < 0")));
        }
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Sample {
            tokens: Vec::new(),
            log_probs: Vec::new(),
        };
        // Weights are bound once; each step appends a fresh forward pass.
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        while out.tokens.len() < max_new && seq.len() < self.config.max_seq_len {
            let logits = self.last_logits(&mut g, &b, &seq)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let tok = if temperature == 0.0 {
                logits
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &l)| if l > best.1 { (i, l) } else { best })
                    .0
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
                let z: f64 = scaled.iter().sum();
                let u: f64 = rng.random::<f64>() * z;
                let mut acc = 0.0;
                let mut pick = scaled.len() - 1;
                for (i, p) in scaled.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            out.log_probs.push(logits[tok] - lse);
            out.tokens.push(tok);
            seq.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(out)
    }

    /// Adds graph gradients into the `grad` buffers of trainable tensors.
    pub fn accumulate_grads(&mut self, b: &Binding, grads: &Gradients) {
        for (name, t) in self.weights.iter_mut() {
            if t.requires_grad {
                if let Some(gr) = grads.get(b.base[name]) {
                    t.accumulate_grad(gr);
                }
            }
        }
        for a in self.adapters.iter_mut() {
            let (va, vb, _) = b.adapters[&a.target];
            if a.a.requires_grad {
                if let Some(gr) = grads.get(va) {
                    a.a.accumulate_grad(gr);
                }
            }
            if a.b.requires_grad {
                if let Some(gr) = grads.get(vb) {
                    a.b.accumulate_grad(gr);
                }
            }
        }
    }

    /// Names of all base weights that hold no adapter.
    pub fn base_weight_names(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }
}

impl Parameters for PolicyModel {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, t) in &self.weights {
            f(k, t);
        }
        for a in &self.adapters {
            f(&format!("{}.lora_a", a.target), &a.a);
            f(&format!("{}.lora_b", a.target), &a.b);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, t) in self.weights.iter_mut() {
            f(k, t);
        }
        for a in self.adapters.iter_mut() {
            f(&format!("{}.lora_a", a.target), &mut a.a);
            f(&format!("{}.lora_b", a.target), &mut a.b);
        }
    }
}
