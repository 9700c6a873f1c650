use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::seed;

const MERSENNE_61: u64 = (1 << 61) - 1;

/// Token shingles of width `k`; a sequence shorter than `k` is one shingle.
pub fn shingles(tokens: &[usize], k: usize) -> BTreeSet<Vec<usize>> {
    if tokens.is_empty() {
        return BTreeSet::new();
    }
    if tokens.len() < k {
        return BTreeSet::from([tokens.to_vec()]);
    }
    tokens.windows(k).map(<[usize]>::to_vec).collect()
}

/// |A ∩ B| / |A ∪ B|, with 0 for two empty sets.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn token_jaccard(a: &[usize], b: &[usize], k: usize) -> f64 {
    jaccard(&shingles(a, k), &shingles(b, k))
}

fn shingle_hash(s: &[usize]) -> u64 {
    let mut h = Sha256::new();
    for t in s {
        h.update((*t as u64).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest")) % MERSENNE_61
}

fn mulmod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % MERSENNE_61 as u128) as u64
}

/// Universal-hash MinHash over token shingles.
#[derive(Debug, Clone)]
pub struct MinHasher {
    pub shingle: usize,
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(num_hashes: usize, shingle: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "minhash");
        let coeffs = (0..num_hashes)
            .map(|_| (rng.random_range(1..MERSENNE_61), rng.random_range(0..MERSENNE_61)))
            .collect();
        Self { shingle, coeffs }
    }

    pub fn num_hashes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn signature(&self, tokens: &[usize]) -> Vec<u64> {
        let hs: Vec<u64> = shingles(tokens, self.shingle).iter().map(|s| shingle_hash(s)).collect();
        self.coeffs
            .iter()
            .map(|&(a, b)| {
                hs.iter()
                    .map(|&x| (mulmod(a, x) + b) % MERSENNE_61)
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }

    pub fn estimate(a: &[u64], b: &[u64]) -> f64 {
        let eq = a.iter().zip(b).filter(|(x, y)| x == y).count();
        eq as f64 / a.len().max(1) as f64
    }
}

/// Banded LSH index over signatures.
#[derive(Debug, Clone)]
pub struct LshIndex {
    bands: usize,
    rows: usize,
    buckets: Vec<BTreeMap<Vec<u64>, Vec<usize>>>,
}

impl LshIndex {
    /// `bands · rows` must equal the signature length.
    pub fn new(bands: usize, rows: usize) -> Self {
        Self {
            bands,
            rows,
            buckets: vec![BTreeMap::new(); bands],
        }
    }

    pub fn insert(&mut self, id: usize, sig: &[u64]) {
        assert_eq!(sig.len(), self.bands * self.rows, "signature length");
        for (b, chunk) in sig.chunks(self.rows).enumerate() {
            self.buckets[b].entry(chunk.to_vec()).or_default().push(id);
        }
    }

    /// Ids sharing at least one band with `sig`, ascending.
    pub fn candidates(&self, sig: &[u64]) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for (b, chunk) in sig.chunks(self.rows).enumerate() {
            if let Some(ids) = self.buckets[b].get(chunk) {
                out.extend(ids.iter().copied());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_edges() {
        assert_eq!(token_jaccard(&[1, 2, 3, 4], &[1, 2, 3, 4], 3), 1.0);
        assert_eq!(token_jaccard(&[1, 2, 3], &[4, 5, 6], 3), 0.0);
        assert_eq!(token_jaccard(&[1, 2, 3, 4], &[1, 2, 3, 5], 3), 1.0 / 3.0);
        assert_eq!(shingles(&[7, 8], 3).len(), 1);
    }

    #[test]
    fn signatures_are_seeded() {
        let a = MinHasher::new(16, 3, 1).signature(&[1, 2, 3, 4]);
        assert_eq!(a, MinHasher::new(16, 3, 1).signature(&[1, 2, 3, 4]));
        assert_ne!(a, MinHasher::new(16, 3, 2).signature(&[1, 2, 3, 4]));
    }
}
