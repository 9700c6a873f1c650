use std::collections::BTreeMap;

pub const MAX_N: usize = 4;

fn ngram_counts<T: Ord + Clone>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    pub matches: [usize; MAX_N],
    pub totals: [usize; MAX_N],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add<T: Ord + Clone>(&mut self, cand: &[T], refs: &[&[T]]) {
        for n in 1..=MAX_N {
            let c = ngram_counts(cand, n);
            let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &c {
                self.matches[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            self.totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
        self.cand_len += cand.len();
        // Closest reference length; ties go to the shorter one.
        self.ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
    }

    /// Geometric mean of add-one-smoothed precisions times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_N)
            .map(|i| {
                let (m, t) = (self.matches[i], self.totals[i]);
                if m == 0 {
                    (1.0 / (t as f64 + 1.0)).ln()
                } else {
                    (m as f64 / t as f64).ln()
                }
            })
            .sum::<f64>()
            / MAX_N as f64;
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * log_p.exp()
    }
}

/// Corpus BLEU-4 in [0, 1]; each candidate may have several references.
pub fn bleu4<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut s = BleuStats::default();
    for (c, rs) in candidates.iter().zip(references) {
        let refs: Vec<&[T]> = rs.iter().map(Vec::as_slice).collect();
        s.add(c, &refs);
    }
    s.score()
}

/// Single-reference convenience form.
pub fn bleu4_single<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<T>]) -> f64 {
    let refs: Vec<Vec<Vec<T>>> = references.iter().map(|r| vec![r.clone()]).collect();
    bleu4(candidates, &refs)
}

/// Mean BLEU-4 of each sequence against all others; `None` below two sequences.
pub fn self_bleu<T: Ord + Clone>(corpus: &[Vec<T>]) -> Option<f64> {
    if corpus.len() < 2 {
        return None;
    }
    let total: f64 = (0..corpus.len())
        .map(|i| {
            let refs: Vec<&[T]> = corpus
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, r)| r.as_slice())
                .collect();
            let mut s = BleuStats::default();
            s.add(&corpus[i], &refs);
            s.score()
        })
        .sum();
    Some(total / corpus.len() as f64)
}

/// Unique bigrams over total bigrams across the corpus; 0 when there are none.
pub fn distinct2<T: Ord + Clone>(corpus: &[Vec<T>]) -> f64 {
    let mut seen = std::collections::BTreeSet::new();
    let mut total = 0;
    for s in corpus {
        for w in s.windows(2) {
            seen.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_is_one() {
        let c = vec![toks("a b c d e")];
        assert_eq!(bleu4_single(&c, &c), 1.0);
        let c = vec![toks("x"), toks("a b")];
        assert!((bleu4_single(&c, &c) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_equal_length() {
        let v = bleu4_single(&[toks("a b c d")], &[toks("e f g h")]);
        let expect = (1.0f64 / 5.0 * 1.0 / 4.0 * 1.0 / 3.0 * 1.0 / 2.0).powf(0.25);
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        assert_eq!(bleu4_single(&[Vec::<String>::new()], &[toks("a b")]), 0.0);
    }

    #[test]
    fn diversity_examples() {
        assert!((distinct2(&[toks("a b a b")]) - 2.0 / 3.0).abs() < 1e-15);
        let same = vec![toks("a b c d e"); 3];
        assert_eq!(self_bleu(&same), Some(1.0));
        assert_eq!(self_bleu(&[toks("a b")]), None);
    }
}
