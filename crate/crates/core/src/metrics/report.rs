use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{AuditBlock, MetricError, PolitenessScorer, Reliability, StyleClassifier};
use crate::task::extract_judgment;

/// Mean calibrated professor posterior.
pub fn sac(responses: &[Vec<usize>], classifier: &StyleClassifier) -> Result<f64, MetricError> {
    let ps: Vec<f64> = responses.iter().map(|r| classifier.posterior(r)).collect();
    sac_from_posteriors(&ps)
}

pub fn sac_from_posteriors(ps: &[f64]) -> Result<f64, MetricError> {
    if ps.is_empty() {
        return Err(MetricError::Contract("SAC over an empty response set".into()));
    }
    Ok(ps.iter().sum::<f64>() / ps.len() as f64)
}

/// Mean of 1 − |p(ŷ) − p(y*)|.
pub fn apc(responses: &[Vec<usize>], references: &[Vec<usize>], scorer: &PolitenessScorer) -> Result<f64, MetricError> {
    if responses.len() != references.len() {
        return Err(MetricError::Contract(format!(
            "{} responses but {} references",
            responses.len(),
            references.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = responses
        .iter()
        .zip(references)
        .map(|(a, b)| (scorer.score(a), scorer.score(b)))
        .collect();
    apc_from_scores(&pairs)
}

pub fn apc_from_scores(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Contract("APC over an empty response set".into()));
    }
    Ok(pairs.iter().map(|(a, b)| 1.0 - (a - b).abs()).sum::<f64>() / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaResult {
    pub ca: f64,
    pub extraction_failures: usize,
}

/// Judgment agreement; a missing or repeated judgment token counts as wrong.
pub fn ca(responses: &[Vec<usize>], labels: &[bool]) -> Result<CaResult, MetricError> {
    if responses.len() != labels.len() {
        return Err(MetricError::Contract("one label per response required".into()));
    }
    if responses.is_empty() {
        return Err(MetricError::Contract("CA over an empty response set".into()));
    }
    let mut right = 0;
    let mut failures = 0;
    for (r, &z) in responses.iter().zip(labels) {
        match extract_judgment(r) {
            Some(j) if j == z => right += 1,
            Some(_) => {}
            None => failures += 1,
        }
    }
    Ok(CaResult {
        ca: right as f64 / responses.len() as f64,
        extraction_failures: failures,
    })
}

/// Fraction of prompts where `a` out-rewards `b`; ties count half.
pub fn pwr(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Contract(format!("{} vs {} rewards", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(MetricError::Contract("PWR over no prompts".into()));
    }
    let wins: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 })
        .sum();
    Ok(wins / a.len() as f64)
}

/// Headline metrics (all in [0, 1]) plus reliability and audit details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sac: f64,
    pub apc: f64,
    pub bleu4: f64,
    pub ca: f64,
    pub pwr: Option<f64>,
    pub n: usize,
    pub extraction_failures: usize,
    pub empty_responses: usize,
    pub oracle_style_rate: f64,
    pub oracle_correct_rate: f64,
    pub classifier: Option<Reliability>,
    pub audit: Option<AuditBlock>,
}

pub const CSV_HEADER: &str = "SAC,APC,BLEU-4,CA,PWR";

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let pwr = self.pwr.map_or(String::new(), |v| v.to_string());
        format!("{},{},{},{},{}", self.sac, self.apc, self.bleu4, self.ca, pwr)
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    /// Percent cells with one decimal; a missing PWR prints as "--".
    pub fn cells(&self) -> [String; 5] {
        [
            pct(self.sac),
            pct(self.apc),
            pct(self.bleu4),
            pct(self.ca),
            self.pwr.map_or("--".into(), pct),
        ]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| SAC | APC | BLEU-4 | CA | PWR |\n|---|---|---|---|---|\n");
        writeln!(s, "| {} |", self.cells().join(" | ")).unwrap();
        writeln!(
            s,
            "\nn = {}, judgment extraction failures = {}, empty responses = {}, oracle style = {}, oracle correctness = {}",
            self.n,
            self.extraction_failures,
            self.empty_responses,
            pct(self.oracle_style_rate),
            pct(self.oracle_correct_rate)
        )
        .unwrap();
        if let Some(r) = &self.classifier {
            writeln!(
                s,
                "style classifier: accuracy {}, macro-F1 {}, ECE {:.3}",
                pct(r.accuracy),
                pct(r.macro_f1),
                r.ece
            )
            .unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(pwr(&[2.0, 3.0], &[1.0, 4.0]).unwrap(), 0.5);
        assert_eq!(pwr(&[2.0, 5.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(pwr(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert!(pwr(&[1.0], &[]).is_err());
        assert!((apc_from_scores(&[(0.3, 0.8)]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(apc_from_scores(&[(0.0, 1.0), (0.0, 1.0)]).unwrap(), 0.0);
        assert_eq!(sac_from_posteriors(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(sac_from_posteriors(&[]).is_err());
    }

    #[test]
    fn ca_tallies_failures() {
        use crate::task::vocab::{CORRECT, INCORRECT};
        let r = ca(&[vec![4, 5], vec![7]], &[true, false]).unwrap();
        assert_eq!((r.ca, r.extraction_failures), (0.0, 2));
        let r = ca(&[vec![CORRECT], vec![INCORRECT, 3]], &[true, false]).unwrap();
        assert_eq!((r.ca, r.extraction_failures), (1.0, 0));
    }

    #[test]
    fn missing_pwr_prints_dashes() {
        let r = MetricsReport {
            sac: 0.962,
            apc: 0.9,
            bleu4: 0.5,
            ca: 1.0,
            pwr: None,
            n: 1,
            extraction_failures: 0,
            empty_responses: 0,
            oracle_style_rate: 1.0,
            oracle_correct_rate: 1.0,
            classifier: None,
            audit: None,
        };
        assert_eq!(r.cells(), ["96.2", "90.0", "50.0", "100.0", "--"].map(String::from));
    }
}
