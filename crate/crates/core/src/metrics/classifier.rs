use serde::{Deserialize, Serialize};

/// Sparse unigram + bigram count features over a closed vocabulary.
fn features(tokens: &[usize], vocab: usize) -> Vec<(usize, f64)> {
    let mut f: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for &t in tokens {
        *f.entry(t.min(vocab - 1)).or_insert(0.0) += 1.0;
    }
    for w in tokens.windows(2) {
        let idx = vocab + w[0].min(vocab - 1) * vocab + w[1].min(vocab - 1);
        *f.entry(idx).or_insert(0.0) += 1.0;
    }
    f.into_iter().collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub bins: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            l2: 1e-3,
            bins: 10,
        }
    }
}

/// Logistic regression on n-gram counts with a monotone histogram calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleClassifier {
    pub vocab: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Calibrated posterior per equal-width bin of the raw probability.
    pub calibration: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub ece: f64,
}

impl StyleClassifier {
    /// Full-batch gradient descent on `train`, then calibration on `calib`.
    pub fn fit(train: &[(Vec<usize>, bool)], calib: &[(Vec<usize>, bool)], vocab: usize, cfg: &ClassifierConfig) -> Self {
        let dim = vocab + vocab * vocab;
        let xs: Vec<Vec<(usize, f64)>> = train.iter().map(|(t, _)| features(t, vocab)).collect();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let n = train.len().max(1) as f64;
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, (_, y)) in xs.iter().zip(train) {
                let z = b + x.iter().map(|&(i, v)| w[i] * v).sum::<f64>();
                let err = sigmoid(z) - if *y { 1.0 } else { 0.0 };
                for &(i, v) in x {
                    gw[i] += err * v;
                }
                gb += err;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= cfg.lr * (g / n + cfg.l2 * *wi);
            }
            b -= cfg.lr * gb / n;
        }
        let mut c = Self {
            vocab,
            weights: w,
            bias: b,
            calibration: (0..cfg.bins).map(|i| (i as f64 + 0.5) / cfg.bins as f64).collect(),
        };
        c.calibrate(calib);
        c
    }

    pub fn raw(&self, tokens: &[usize]) -> f64 {
        let z = self.bias
            + features(tokens, self.vocab)
                .iter()
                .map(|&(i, v)| self.weights[i] * v)
                .sum::<f64>();
        sigmoid(z)
    }

    fn bin(&self, p: f64) -> usize {
        let k = self.calibration.len();
        ((p * k as f64) as usize).min(k - 1)
    }

    /// Calibrated probability that `tokens` is professor-styled.
    pub fn posterior(&self, tokens: &[usize]) -> f64 {
        self.calibration[self.bin(self.raw(tokens))]
    }

    /// Histogram binning made monotone by pool-adjacent-violators; empty
    /// bins inherit the nearest populated bin below (or above).
    fn calibrate(&mut self, data: &[(Vec<usize>, bool)]) {
        let k = self.calibration.len();
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0.0; k];
        for (t, y) in data {
            let b = self.bin(self.raw(t));
            sum[b] += if *y { 1.0 } else { 0.0 };
            cnt[b] += 1.0;
        }
        // blocks of (value, weight, bins covered)
        let mut blocks: Vec<(f64, f64, Vec<usize>)> = Vec::new();
        for i in (0..k).filter(|&i| cnt[i] > 0.0) {
            blocks.push((sum[i] / cnt[i], cnt[i], vec![i]));
            while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
                let (v2, w2, b2) = blocks.pop().expect("len > 1");
                let last = blocks.last_mut().expect("len > 0");
                last.0 = (last.0 * last.1 + v2 * w2) / (last.1 + w2);
                last.1 += w2;
                last.2.extend(b2);
            }
        }
        if blocks.is_empty() {
            return;
        }
        let mut cal = vec![f64::NAN; k];
        for (v, _, bins) in &blocks {
            for &b in bins {
                cal[b] = *v;
            }
        }
        let first = cal.iter().copied().find(|v| !v.is_nan()).expect("nonempty");
        let mut prev = first;
        for c in cal.iter_mut() {
            if c.is_nan() {
                *c = prev;
            } else {
                prev = *c;
            }
        }
        self.calibration = cal;
    }

    /// Accuracy and macro-F1 at 0.5, and expected calibration error over
    /// equal-width bins of the calibrated posterior.
    pub fn reliability(&self, data: &[(Vec<usize>, bool)]) -> Reliability {
        let k = self.calibration.len();
        let mut conf = vec![0.0; k];
        let mut pos = vec![0.0; k];
        let mut cnt = vec![0.0; k];
        let (mut tp, mut fp, mut tn, mut fnn) = (0.0, 0.0, 0.0, 0.0);
        for (t, y) in data {
            let p = self.posterior(t);
            let b = ((p * k as f64) as usize).min(k - 1);
            conf[b] += p;
            pos[b] += if *y { 1.0 } else { 0.0 };
            cnt[b] += 1.0;
            match (p >= 0.5, *y) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fnn += 1.0,
            }
        }
        let n = data.len().max(1) as f64;
        let ece = (0..k).map(|b| (conf[b] - pos[b]).abs()).sum::<f64>() / n;
        let f1 = |tp: f64, fp: f64, fnn: f64| if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        Reliability {
            accuracy: (tp + tn) / n,
            macro_f1: 0.5 * (f1(tp, fp, fnn) + f1(tn, fnn, fp)),
            ece,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{gen_style_corpus, SyntheticSpec};

    #[test]
    fn separates_the_two_templates() {
        let spec = SyntheticSpec::default();
        let data = gen_style_corpus(&spec, 400, 1).unwrap();
        let v = spec.vocab().unwrap().len();
        let c = StyleClassifier::fit(&data[..200], &data[200..300], v, &ClassifierConfig::default());
        let r = c.reliability(&data[300..]);
        assert!(r.accuracy >= 0.98, "{r:?}");
        assert!(r.ece <= 0.05, "{r:?}");
        assert!(c.calibration.windows(2).all(|w| w[0] <= w[1]));
    }
}
