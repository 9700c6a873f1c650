use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bleu::{distinct2, self_bleu};
use super::minhash::{jaccard, shingles, LshIndex, MinHasher};
use crate::task::{LabeledExample, SyntheticSpec};

/// One corpus entry split into the fields the audit compares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditItem {
    pub problem: Vec<usize>,
    pub solution: Vec<usize>,
    pub feedback: Vec<usize>,
}

impl AuditItem {
    /// Problem id plus statement, then solution code plus symptom.
    pub fn from_example(spec: &SyntheticSpec, ex: &LabeledExample) -> Self {
        let p = &ex.prompt;
        let stmt_end = 2 + spec.statement_len;
        Self {
            problem: p[1..stmt_end].to_vec(),
            solution: p[stmt_end..p.len() - 1].to_vec(),
            feedback: ex.reference.clone(),
        }
    }

    pub fn tokens(&self) -> Vec<usize> {
        [&self.problem[..], &self.solution, &self.feedback].concat()
    }

    fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for part in [&self.problem, &self.solution, &self.feedback] {
            h.update((part.len() as u64).to_le_bytes());
            for t in part {
                h.update((*t as u64).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub num_hashes: usize,
    pub shingle: usize,
    pub bands: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            num_hashes: 128,
            shingle: 3,
            bands: 32,
            threshold: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBlock {
    pub n_train: usize,
    pub n_test: usize,
    /// Items whose (problem, solution, feedback) hash repeats an earlier item.
    pub exact_dups_removed: usize,
    /// Test items whose verified Jaccard to some train item reaches the threshold.
    pub near_dups_removed: usize,
    pub near_dup_test_indices: Vec<usize>,
    /// Over test items that survive removal.
    pub max_train_test_sim_problem: f64,
    pub max_train_test_sim_feedback: f64,
    pub count_over_threshold: usize,
    pub self_bleu: Option<f64>,
    pub distinct2: f64,
}

impl AuditBlock {
    pub fn exact_dup_rate(&self) -> f64 {
        self.exact_dups_removed as f64 / (self.n_train + self.n_test).max(1) as f64
    }

    pub fn near_dup_rate(&self) -> f64 {
        self.near_dups_removed as f64 / self.n_test.max(1) as f64
    }
}

fn max_sim(test: &BTreeSet<Vec<usize>>, train: &[BTreeSet<Vec<usize>>]) -> f64 {
    train.iter().map(|t| jaccard(test, t)).fold(0.0, f64::max)
}

/// Exact-duplicate removal by content hash, near-duplicate removal by MinHash
/// LSH with exact-Jaccard verification, then train–test similarity and
/// diversity statistics over the surviving test items.
pub fn audit_corpus(train: &[AuditItem], test: &[AuditItem], cfg: &AuditConfig) -> AuditBlock {
    let mut seen = BTreeSet::new();
    let mut exact = 0;
    let mut keep = |it: &AuditItem| {
        let fresh = seen.insert(it.content_hash());
        if !fresh {
            exact += 1;
        }
        fresh
    };
    let train_kept: Vec<&AuditItem> = train.iter().filter(|it| keep(it)).collect();
    let test_kept: Vec<(usize, &AuditItem)> = test.iter().enumerate().filter(|(_, it)| keep(it)).collect();

    let k = cfg.shingle;
    let hasher = MinHasher::new(cfg.num_hashes, k, cfg.seed);
    let rows = cfg.num_hashes / cfg.bands.max(1);
    let mut index = LshIndex::new(cfg.bands, rows);
    let train_full: Vec<BTreeSet<Vec<usize>>> = train_kept.iter().map(|it| shingles(&it.tokens(), k)).collect();
    for (i, it) in train_kept.iter().enumerate() {
        index.insert(i, &hasher.signature(&it.tokens()));
    }
    let mut near = Vec::new();
    let mut survivors = Vec::new();
    for &(ti, it) in &test_kept {
        let toks = it.tokens();
        let sh = shingles(&toks, k);
        let hit = index
            .candidates(&hasher.signature(&toks))
            .into_iter()
            .any(|c| jaccard(&sh, &train_full[c]) >= cfg.threshold);
        if hit {
            near.push(ti);
        } else {
            survivors.push((it, sh));
        }
    }

    let train_problem: Vec<_> = train_kept.iter().map(|it| shingles(&it.problem, k)).collect();
    let train_fb: Vec<_> = train_kept.iter().map(|it| shingles(&it.feedback, k)).collect();
    let mut out = AuditBlock {
        n_train: train.len(),
        n_test: test.len(),
        exact_dups_removed: exact,
        near_dups_removed: near.len(),
        near_dup_test_indices: near,
        max_train_test_sim_problem: 0.0,
        max_train_test_sim_feedback: 0.0,
        count_over_threshold: 0,
        self_bleu: None,
        distinct2: 0.0,
    };
    for (it, sh) in &survivors {
        out.max_train_test_sim_problem = out
            .max_train_test_sim_problem
            .max(max_sim(&shingles(&it.problem, k), &train_problem));
        out.max_train_test_sim_feedback = out
            .max_train_test_sim_feedback
            .max(max_sim(&shingles(&it.feedback, k), &train_fb));
        if max_sim(sh, &train_full) > cfg.threshold {
            out.count_over_threshold += 1;
        }
    }
    let fb: Vec<Vec<usize>> = survivors.iter().map(|(it, _)| it.feedback.clone()).collect();
    out.self_bleu = self_bleu(&fb);
    out.distinct2 = distinct2(&fb);
    out
}

/// Audit columns for each split variant, rendered with the row labels of
/// the leakage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// (column name, split key, audit)
    pub columns: Vec<(String, String, AuditBlock)>,
}

impl AuditReport {
    fn rows(&self) -> Vec<(&'static str, Vec<String>)> {
        let col = |f: &dyn Fn(&AuditBlock) -> String| -> Vec<String> { self.columns.iter().map(|(_, _, b)| f(b)).collect() };
        vec![
            ("Split key", self.columns.iter().map(|(_, k, _)| k.clone()).collect()),
            ("Exact dups rm. (%)", col(&|b| format!("{:.1}", 100.0 * b.exact_dup_rate()))),
            ("Near-dups rm. (%)", col(&|b| format!("{:.1}", 100.0 * b.near_dup_rate()))),
            ("Max train-test sim. (problem)", col(&|b| format!("{:.2}", b.max_train_test_sim_problem))),
            ("Max train-test sim. (ref. fb)", col(&|b| format!("{:.2}", b.max_train_test_sim_feedback))),
            ("# test items >0.8 (Jaccard)", col(&|b| b.count_over_threshold.to_string())),
            ("Self-BLEU", col(&|b| b.self_bleu.map_or("--".into(), |v| format!("{v:.2}")))),
            ("Distinct-2", col(&|b| format!("{:.2}", b.distinct2))),
        ]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Audit / Split |");
        for (name, _, _) in &self.columns {
            write!(s, " {name} |").unwrap();
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for (label, vals) in self.rows() {
            writeln!(s, "| {label} | {} |", vals.join(" | ")).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("audit");
        for (name, _, _) in &self.columns {
            write!(s, ",{name}").unwrap();
        }
        s.push('\n');
        for (label, vals) in self.rows() {
            writeln!(s, "\"{label}\",{}", vals.join(",")).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(p: &[usize], s: &[usize], f: &[usize]) -> AuditItem {
        AuditItem {
            problem: p.to_vec(),
            solution: s.to_vec(),
            feedback: f.to_vec(),
        }
    }

    #[test]
    fn identical_and_disjoint() {
        let a = vec![item(&[1, 2, 3], &[4, 5], &[6, 7, 8, 9])];
        let b = audit_corpus(&a, &a, &AuditConfig::default());
        assert_eq!(b.exact_dups_removed, 1);
        let c = vec![item(&[11, 12, 13], &[14, 15], &[16, 17, 18, 19])];
        let b = audit_corpus(&a, &c, &AuditConfig::default());
        assert_eq!(b.exact_dups_removed, 0);
        assert_eq!(b.near_dups_removed, 0);
        assert_eq!(b.max_train_test_sim_problem, 0.0);
        assert_eq!(b.max_train_test_sim_feedback, 0.0);
    }

    #[test]
    fn identical_fields_give_similarity_one() {
        let a = vec![item(&[1, 2, 3], &[4, 5], &[6, 7, 8, 9])];
        let t = vec![item(&[1, 2, 3], &[20, 21, 22, 23, 24, 25, 26, 27], &[6, 7, 8, 9])];
        let b = audit_corpus(&a, &t, &AuditConfig::default());
        assert_eq!(b.max_train_test_sim_problem, 1.0);
        assert_eq!(b.max_train_test_sim_feedback, 1.0);
    }
}
