#[path = "support/oracles.rs"]
mod oracles;

use stylealign::metrics::{apc_from_scores, bleu4_single, jaccard, pwr, sac_from_posteriors, shingles, MinHasher};

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn bleu_hand_worked_cases() {
    // One substitution at the end: 4/5, 3/4, 2/3, 1/2.
    close(bleu4_single(&[vec![1, 2, 3, 4, 5]], &[vec![1, 2, 3, 4, 6]]), 0.2f64.powf(0.25));
    // Reversed: unigrams all match, higher orders fall back to 1/(total+1).
    close(
        bleu4_single(&[vec![1, 2, 3, 4]], &[vec![4, 3, 2, 1]]),
        (1.0f64 / 4.0 / 3.0 / 2.0).powf(0.25),
    );
    // Exact prefix of a reference twice as long.
    close(bleu4_single(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5, 6, 7, 8]]), (-1.0f64).exp());
    close(bleu4_single(&[vec![7, 8, 9, 10, 11]], &[vec![7, 8, 9, 10, 11]]), 1.0);
}

#[test]
fn bleu_matches_literal_definition() {
    assert!(oracles::bleu_max_abs_diff() <= 1e-12);
}

#[test]
fn minhash_tracks_exact_jaccard() {
    let (mean, max, _) = oracles::minhash_errors();
    assert!(mean <= 0.05, "mean {mean}");
    assert!(max < 0.2, "max {max}");
    let a = shingles(&[1, 2, 3, 4], 3);
    let b = shingles(&[1, 2, 3, 5], 3);
    close(jaccard(&a, &b), 1.0 / 3.0);
    let h = MinHasher::new(128, 3, 7);
    let s = h.signature(&[4, 8, 15, 16, 23, 42]);
    assert_eq!(s.len(), 128);
    assert_eq!(MinHasher::estimate(&s, &s), 1.0);
}

#[test]
fn pwr_counts_ties_half_and_is_antisymmetric() {
    close(pwr(&[3.0, 1.0, 2.0], &[1.0, 1.0, 5.0]).unwrap(), 0.5);
    close(pwr(&[2.0, 2.0, 2.0, 9.0], &[1.0, 1.0, 1.0, 1.0]).unwrap(), 1.0);
    assert!(pwr(&[1.0], &[]).is_err());
    assert_eq!(oracles::pwr_antisymmetry_violations(), 0);
}

#[test]
fn sac_and_apc_are_means() {
    close(sac_from_posteriors(&[0.9, 0.2, 0.7]).unwrap(), 0.6);
    close(apc_from_scores(&[(0.5, 0.5), (0.0, 1.0), (0.25, 0.75)]).unwrap(), 0.5);
    assert!(sac_from_posteriors(&[]).is_err());
}
