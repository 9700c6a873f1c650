//! AdamW with decoupled weight decay, linear warmup and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent ramping the learning rate up from 0.
    pub warmup_frac: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    total_steps: usize,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, total_steps: usize) -> Self {
        Self {
            config,
            total_steps: total_steps.max(1),
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate applied at the next step.
    pub fn current_lr(&self) -> f64 {
        let warmup = (self.config.warmup_frac * self.total_steps as f64).ceil() as usize;
        if warmup == 0 || self.step >= warmup {
            self.config.lr
        } else {
            self.config.lr * (self.step + 1) as f64 / warmup as f64
        }
    }

    /// Global L2 norm over gradients of trainable tensors.
    pub fn grad_norm(params: &dyn Parameters) -> f64 {
        let mut sq = 0.0;
        params.for_each_param(&mut |_, t| {
            if let (true, Some(g)) = (t.requires_grad, t.grad.as_ref()) {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        });
        sq.sqrt()
    }

    /// Applies one update from the accumulated grads, then clears them.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut dyn Parameters) -> f64 {
        let norm = Self::grad_norm(params);
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let state = &mut self.state;
        params.for_each_param_mut(&mut |name, p| {
            if !p.requires_grad {
                return;
            }
            let Some(g) = p.grad.take() else { return };
            let s = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * gi;
                s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = s.m[i] / bc1;
                let vh = s.v[i] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
            }
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    struct One(Tensor);

    impl Parameters for One {
        fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("x", &self.0)
        }
        fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("x", &mut self.0)
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = One(Tensor::new(vec![2], vec![3.0, -2.0]).unwrap().with_requires_grad(true));
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 500);
        for _ in 0..500 {
            let g: Vec<f64> = p.0.data().iter().map(|x| 2.0 * x).collect();
            p.0.accumulate_grad(&g);
            opt.step(&mut p);
        }
        assert!(p.0.data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn warmup_is_linear_and_frozen_params_stay_put() {
        let opt = AdamW::new(AdamWConfig { lr: 1.0, warmup_frac: 0.1, ..Default::default() }, 100);
        assert!((opt.current_lr() - 0.1).abs() < 1e-12);
        let mut p = One(Tensor::full(&[1], 1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), 10);
        opt.step(&mut p);
        assert_eq!(p.0.data(), &[1.0]);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        // With clipping, Adam's first step is still lr·sign(g) in magnitude.
        let mut p = One(Tensor::full(&[1], 0.0).with_requires_grad(true));
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, warmup_frac: 0.0, weight_decay: 0.0, ..Default::default() }, 1);
        p.0.accumulate_grad(&[100.0]);
        let n = opt.step(&mut p);
        assert_eq!(n, 100.0);
        assert!((p.0.data()[0] + 0.1).abs() < 1e-6);
    }
}
