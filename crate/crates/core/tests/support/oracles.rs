//! Independent reference implementations used to cross-check the metrics.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use stylealign::metrics::{bleu4_single, pwr, MinHasher};
use stylealign::seed;

fn counts(s: &[usize], n: usize) -> HashMap<Vec<usize>, usize> {
    let mut m = HashMap::new();
    for i in 0..s.len().saturating_sub(n - 1) {
        *m.entry(s[i..i + n].to_vec()).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU-4 from its textbook definition with one reference per
/// candidate: clipped n-gram precisions pooled over the corpus, a zero
/// count replaced by 1 / (total + 1), geometric mean, brevity penalty.
pub fn literal_bleu(cands: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let mut product = 1.0;
    for n in 1..=4 {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (c, r) in cands.iter().zip(refs) {
            let rc = counts(r, n);
            for (g, k) in counts(c, n) {
                clipped += k.min(*rc.get(&g).unwrap_or(&0));
                total += k;
            }
        }
        let p = if clipped == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            clipped as f64 / total as f64
        };
        product *= p;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(0.25)
}

fn random_seq<R: Rng>(rng: &mut R, vocab: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// 50 random (candidate, reference) pairs over a small alphabet, half of
/// them derived from the reference by local edits so that higher-order
/// n-grams match.
pub fn bleu_pairs() -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = seed::rng(0, "bleu-oracle");
    (0..50)
        .map(|i| {
            let r = random_seq(&mut rng, 6, 14);
            let c = if i % 2 == 0 {
                let mut c = r.clone();
                for v in c.iter_mut() {
                    if rng.random_bool(0.2) {
                        *v = rng.random_range(0..6);
                    }
                }
                if rng.random_bool(0.5) {
                    c.truncate(rng.random_range(1..=c.len()));
                }
                c
            } else {
                random_seq(&mut rng, 6, 14)
            };
            (c, r)
        })
        .collect()
}

/// Largest |bleu4 − literal| over the pairs one at a time and as a corpus.
pub fn bleu_max_abs_diff() -> f64 {
    let pairs = bleu_pairs();
    let mut worst: f64 = 0.0;
    for (c, r) in &pairs {
        let a = bleu4_single(std::slice::from_ref(c), std::slice::from_ref(r));
        let b = literal_bleu(std::slice::from_ref(c), std::slice::from_ref(r));
        worst = worst.max((a - b).abs());
    }
    let (cs, rs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    worst.max((bleu4_single(&cs, &rs) - literal_bleu(&cs, &rs)).abs())
}

fn exact_jaccard(a: &[usize], b: &[usize], k: usize) -> f64 {
    let sh = |s: &[usize]| -> BTreeSet<Vec<usize>> {
        if s.len() < k {
            return BTreeSet::from([s.to_vec()]);
        }
        s.windows(k).map(<[usize]>::to_vec).collect()
    };
    let (x, y) = (sh(a), sh(b));
    let inter = x.intersection(&y).count() as f64;
    let union = x.union(&y).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// (mean |error|, max |error|, fraction of pairs within ±0.05) of 128-hash
/// MinHash estimates on 100 pairs whose true Jaccard spans [0, 1].
pub fn minhash_errors() -> (f64, f64, f64) {
    let mut rng = seed::rng(0, "minhash-oracle");
    let mh = MinHasher::new(128, 3, 7);
    let mut errs = Vec::new();
    for i in 0..100 {
        let a: Vec<usize> = (0..40).map(|_| rng.random_range(0..60)).collect();
        let edit = i as f64 / 100.0;
        let b: Vec<usize> = a
            .iter()
            .map(|&t| if rng.random_bool(edit) { rng.random_range(0..60) } else { t })
            .collect();
        let est = MinHasher::estimate(&mh.signature(&a), &mh.signature(&b));
        errs.push((est - exact_jaccard(&a, &b, 3)).abs());
    }
    let n = errs.len() as f64;
    (
        errs.iter().sum::<f64>() / n,
        errs.iter().cloned().fold(0.0, f64::max),
        errs.iter().filter(|&&e| e <= 0.05).count() as f64 / n,
    )
}

/// Checks pwr(a, b) + pwr(b, a) == 1 exactly over random reward vectors
/// with deliberate ties; returns the number of violations.
pub fn pwr_antisymmetry_violations() -> usize {
    let mut rng = seed::rng(0, "pwr-oracle");
    let mut bad = 0;
    for n in 1..=200 {
        let a: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5) as f64) * 0.5).collect();
        let b: Vec<f64> = (0..n).map(|_| (rng.random_range(0..5) as f64) * 0.5).collect();
        if pwr(&a, &b).unwrap() + pwr(&b, &a).unwrap() != 1.0 {
            bad += 1;
        }
    }
    bad
}
