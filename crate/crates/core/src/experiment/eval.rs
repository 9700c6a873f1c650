use std::path::{Path, PathBuf};

use super::{write_file, Dataset, EvalConfig, ExperimentError, RunConfig, Thresholds, DATA_DIR};
use crate::metrics::{
    apc, bleu4_single, ca, pwr, sac, MetricError, MetricsReport, PolitenessScorer, Reliability,
    StyleClassifier,
};
use crate::policy::{load_checkpoint, ModelError, PolicyModel};
use crate::reward::RewardModel;
use crate::task::vocab::EOS;
use crate::task::{oracle_correct, oracle_style, LabeledExample, Vocab};

/// Greedy decoding plus the metric suite, with a style classifier fitted on
/// the run's labeled style corpus (half train, a quarter calibration, a
/// quarter held out for the reliability numbers).
#[derive(Debug, Clone)]
pub struct Evaluator {
    vocab: Vocab,
    classifier: StyleClassifier,
    reliability: Reliability,
    politeness: PolitenessScorer,
    max_new_tokens: usize,
}

impl Evaluator {
    pub fn new(data: &Dataset, cfg: &EvalConfig) -> Self {
        let n = data.style.len();
        let (a, b) = (n / 2, n / 2 + n / 4);
        let classifier = StyleClassifier::fit(&data.style[..a], &data.style[a..b], data.vocab.len(), &cfg.classifier);
        let reliability = classifier.reliability(&data.style[b..]);
        Self {
            vocab: data.vocab.clone(),
            classifier,
            reliability,
            politeness: PolitenessScorer::new(&data.vocab),
            max_new_tokens: cfg.max_new_tokens,
        }
    }

    pub fn classifier(&self) -> &StyleClassifier {
        &self.classifier
    }

    pub fn reliability(&self) -> Reliability {
        self.reliability
    }

    /// Greedy responses, EOS included when emitted.
    pub fn generate(&self, policy: &PolicyModel, examples: &[LabeledExample]) -> Result<Vec<Vec<usize>>, ModelError> {
        // Greedy decoding never consults the generator.
        let mut rng = crate::seed::rng(0, "greedy");
        examples
            .iter()
            .map(|e| Ok(policy.sample(&e.prompt, self.max_new_tokens, 0.0, EOS, &mut rng)?.tokens))
            .collect()
    }

    pub fn rewards(rm: &RewardModel, examples: &[LabeledExample], responses: &[Vec<usize>]) -> Result<Vec<f64>, ModelError> {
        examples.iter().zip(responses).map(|(e, r)| rm.reward(&e.prompt, r)).collect()
    }

    pub fn report(
        &self,
        examples: &[LabeledExample],
        responses: &[Vec<usize>],
        pwr: Option<f64>,
    ) -> Result<MetricsReport, MetricError> {
        if examples.len() != responses.len() {
            return Err(MetricError::Contract("one response per example required".into()));
        }
        let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.reference.clone()).collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.correct).collect();
        let c = ca(responses, &labels)?;
        let n = responses.len() as f64;
        let rate = |f: &dyn Fn(&LabeledExample, &Vec<usize>) -> bool| {
            examples.iter().zip(responses).filter(|(e, r)| f(e, r)).count() as f64 / n
        };
        Ok(MetricsReport {
            sac: sac(responses, &self.classifier)?,
            apc: apc(responses, &refs, &self.politeness)?,
            bleu4: bleu4_single(responses, &refs),
            ca: c.ca,
            pwr,
            n: responses.len(),
            extraction_failures: c.extraction_failures,
            empty_responses: responses.iter().filter(|r| r.is_empty() || r[..] == [EOS]).count(),
            oracle_style_rate: rate(&|_, r| oracle_style(&self.vocab, r)),
            oracle_correct_rate: rate(&|e, r| oracle_correct(r, e.correct)),
            classifier: Some(self.reliability),
            audit: None,
        })
    }

    /// Full evaluation of `policy`; PWR against `baseline` when both it and
    /// a reward model are supplied.
    pub fn evaluate(
        &self,
        policy: &PolicyModel,
        examples: &[LabeledExample],
        comparison: Option<(&RewardModel, &[f64])>,
    ) -> Result<(MetricsReport, Vec<Vec<usize>>), ExperimentError> {
        let st = ExperimentError::stage("evaluate");
        let responses = self.generate(policy, examples).map_err(|e| st(&e))?;
        let win = match comparison {
            Some((rm, base)) => {
                let mine = Self::rewards(rm, examples, &responses).map_err(|e| st(&e))?;
                Some(pwr(&mine, base).map_err(|e| st(&e))?)
            }
            None => None,
        };
        let report = self.report(examples, &responses, win).map_err(|e| st(&e))?;
        Ok((report, responses))
    }
}

/// Fails with exit status 4 when a configured minimum is not met.
pub(crate) fn check_thresholds(r: &MetricsReport, t: &Thresholds) -> Result<(), ExperimentError> {
    let mut misses = Vec::new();
    let mut check = |name: &str, got: Option<f64>, min: Option<f64>| {
        if let Some(min) = min {
            match got {
                Some(v) if v >= min => {}
                Some(v) => misses.push(format!("{name} {v:.4} < {min}")),
                None => misses.push(format!("{name} unavailable (needs --baseline)")),
            }
        }
    };
    check("SAC", Some(r.sac), t.sac);
    check("APC", Some(r.apc), t.apc);
    check("BLEU-4", Some(r.bleu4), t.bleu4);
    check("CA", Some(r.ca), t.ca);
    check("PWR", r.pwr, t.pwr);
    if misses.is_empty() {
        Ok(())
    } else {
        Err(ExperimentError::Threshold(misses.join("; ")))
    }
}

pub(crate) fn write_report(dir: &Path, stem: &str, r: &MetricsReport) -> Result<(), ExperimentError> {
    write_file(&dir.join(format!("{stem}.csv")), r.to_csv())?;
    write_file(&dir.join(format!("{stem}.md")), r.to_markdown())?;
    let json = serde_json::to_string_pretty(r).expect("report serializes");
    write_file(&dir.join(format!("{stem}.json")), json + "\n")
}

/// Inputs of `eval` beyond the run config.
#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub baseline: Option<PathBuf>,
    /// Reward model for PWR; defaults to the run's `checkpoints/rm.json`.
    pub reward: Option<PathBuf>,
}

fn load_policy(path: &Path, vocab: &Vocab) -> Result<PolicyModel, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (m, _) = load_checkpoint(path).map_err(|e| ExperimentError::Stage {
        stage: "load_checkpoint".into(),
        msg: e.to_string(),
    })?;
    if m.config.vocab_size != vocab.len() {
        return Err(ExperimentError::Config(format!(
            "checkpoint {} has vocab_size {} but the dataset vocabulary has {} tokens",
            path.display(),
            m.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(m)
}

/// `eval`: greedy decoding on the standard test split. Writes
/// `<out_dir>/eval/report.{csv,md,json}` before checking thresholds.
pub fn cmd_eval(cfg: &RunConfig, req: &EvalRequest) -> Result<MetricsReport, ExperimentError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = Dataset::load(&cfg.out_dir.join(DATA_DIR), &cfg)?;
    let policy = load_policy(&req.checkpoint, &data.vocab)?;
    let ev = Evaluator::new(&data, &cfg.eval);
    let test = &data.standard.test;
    let st = ExperimentError::stage("evaluate");
    let report = match &req.baseline {
        None => ev.evaluate(&policy, test, None)?.0,
        Some(b) => {
            let base = load_policy(b, &data.vocab)?;
            let rm_path = req
                .reward
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("checkpoints/rm.json"));
            if !rm_path.exists() {
                return Err(ExperimentError::Config(format!(
                    "PWR needs a reward model; {} does not exist",
                    rm_path.display()
                )));
            }
            let (backbone, heads) = load_checkpoint(&rm_path).map_err(|e| st(&e))?;
            let rm = RewardModel::from_parts(backbone, &heads)?;
            let base_resp = ev.generate(&base, test).map_err(|e| st(&e))?;
            let base_rewards = Evaluator::rewards(&rm, test, &base_resp).map_err(|e| st(&e))?;
            ev.evaluate(&policy, test, Some((&rm, &base_rewards)))?.0
        }
    };
    write_report(&cfg.out_dir.join("eval"), "report", &report)?;
    check_thresholds(&report, &cfg.thresholds)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_score_perfectly() {
        let cfg = RunConfig::default();
        let data = Dataset::synthesize(&cfg).unwrap();
        let ev = Evaluator::new(&data, &cfg.eval);
        let test = &data.standard.test;
        let refs: Vec<Vec<usize>> = test.iter().map(|e| e.reference.clone()).collect();
        let r = ev.report(test, &refs, None).unwrap();
        assert_eq!(r.bleu4, 1.0);
        assert_eq!(r.ca, 1.0);
        assert_eq!(r.apc, 1.0);
        assert_eq!(r.oracle_style_rate, 1.0);
        assert!(r.sac > 0.9);
    }

    #[test]
    fn thresholds_flag_misses() {
        let r = MetricsReport {
            sac: 0.5,
            apc: 0.9,
            bleu4: 0.1,
            ca: 1.0,
            pwr: None,
            n: 1,
            extraction_failures: 0,
            empty_responses: 0,
            oracle_style_rate: 0.0,
            oracle_correct_rate: 1.0,
            classifier: None,
            audit: None,
        };
        check_thresholds(&r, &Thresholds::default()).unwrap();
        let t = Thresholds {
            sac: Some(0.6),
            ca: Some(0.9),
            ..Default::default()
        };
        let e = check_thresholds(&r, &t).unwrap_err();
        assert_eq!(e.exit_code(), 4);
        assert!(e.to_string().contains("SAC"));
        let t = Thresholds {
            pwr: Some(0.5),
            ..Default::default()
        };
        assert!(check_thresholds(&r, &t).is_err());
    }
}
