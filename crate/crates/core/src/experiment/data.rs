use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_file, ExperimentError, RunConfig};
use crate::task::io::{read_jsonl, DemoRecord, PreferenceRecord};
use crate::task::split::{split_by_problem, split_instances, Splits};
use crate::task::{
    gen_demonstrations, gen_generic_corpus, gen_preferences, gen_style_corpus, prompt_label,
    Demonstration, LabeledExample, PreferencePair, SyntheticSpec, TaskError, Vocab, VocabManifest,
};

/// Dataset directory inside a run directory.
pub const DATA_DIR: &str = "data";

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Git-style object hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn git_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StyleRecord {
    feedback: String,
    professor: bool,
}

/// Every corpus a run consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub vocab: Vocab,
    /// Instance-level 70/10/20 split.
    pub standard: Splits<LabeledExample>,
    /// Problem-disjoint split of the same demonstrations.
    pub new_problems: Splits<LabeledExample>,
    pub prefs_train: Vec<PreferencePair>,
    pub prefs_val: Vec<PreferencePair>,
    /// Generic-style corpus for base pretraining.
    pub pretrain: Vec<Demonstration>,
    /// Labeled feedback for the style classifier.
    pub style: Vec<(Vec<usize>, bool)>,
    /// Content hash of each file, keyed by path relative to the data dir.
    pub hashes: BTreeMap<String, String>,
}

fn task_err(stage: &'static str) -> impl Fn(TaskError) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage: stage.into(),
        msg: e.to_string(),
    }
}

impl Dataset {
    /// Generates every corpus from the (resolved) config.
    pub fn synthesize(cfg: &RunConfig) -> Result<Self, ExperimentError> {
        let spec = cfg.data.spec.clone();
        let vocab = spec.vocab().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let s = spec.seed;
        let synth = task_err("synth");
        let demos = gen_demonstrations(&spec, cfg.data.n_demonstrations, s).map_err(&synth)?;
        let standard = split_instances(&demos, s);
        let new_problems = split_by_problem(&demos, spec.n_problems, |e| e.problem, s);
        let prefs = gen_preferences(&spec, cfg.data.n_preferences, s).map_err(&synth)?;
        let n_pt = ((prefs.len() as f64 * cfg.data.pref_train_frac).floor() as usize)
            .clamp(1, prefs.len() - 1);
        let (pt, pv) = prefs.split_at(n_pt);
        let pretrain = gen_generic_corpus(&spec, cfg.data.n_pretrain, s).map_err(&synth)?;
        let style = gen_style_corpus(&spec, cfg.data.n_style, s).map_err(&synth)?;
        Ok(Self {
            spec,
            vocab,
            standard,
            new_problems,
            prefs_train: pt.to_vec(),
            prefs_val: pv.to_vec(),
            pretrain,
            style,
            hashes: BTreeMap::new(),
        })
    }

    fn files(&self) -> Result<Vec<(String, Vec<u8>)>, TaskError> {
        let v = &self.vocab;
        let mut out = vec![(
            "vocab.json".to_string(),
            serde_json::to_vec_pretty(&v.manifest())?,
        )];
        for (variant, splits) in [("standard", &self.standard), ("new_problems", &self.new_problems)] {
            for (name, part) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
                let recs: Vec<DemoRecord> = part
                    .iter()
                    .map(|e| DemoRecord::new(v, &e.demonstration(), name, e.problem))
                    .collect();
                out.push((format!("{variant}/{name}.jsonl"), jsonl_bytes(&recs)?));
            }
        }
        for (name, part) in [("train", &self.prefs_train), ("val", &self.prefs_val)] {
            let recs: Vec<PreferenceRecord> = part.iter().map(|p| PreferenceRecord::new(v, p)).collect();
            out.push((format!("preferences/{name}.jsonl"), jsonl_bytes(&recs)?));
        }
        let pre: Vec<DemoRecord> = self
            .pretrain
            .iter()
            .map(|d| DemoRecord::new(v, d, "pretrain", v.problem_index(d.prompt[1]).unwrap_or(0)))
            .collect();
        out.push(("pretrain.jsonl".into(), jsonl_bytes(&pre)?));
        let style: Vec<StyleRecord> = self
            .style
            .iter()
            .map(|(y, p)| StyleRecord {
                feedback: v.decode(y),
                professor: *p,
            })
            .collect();
        out.push(("style.jsonl".into(), jsonl_bytes(&style)?));
        Ok(out)
    }

    /// Writes the dataset under `dir` and records file hashes.
    pub fn write(&mut self, dir: &Path) -> Result<(), ExperimentError> {
        let files = self.files().map_err(task_err("synth"))?;
        self.hashes.clear();
        for (rel, bytes) in files {
            write_file(&dir.join(&rel), &bytes)?;
            self.hashes.insert(rel, git_hash(&bytes));
        }
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write`]; the vocabulary must
    /// match the one the config implies.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self, ExperimentError> {
        let spec = cfg.data.spec.clone();
        let vocab = spec.vocab().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let vocab_path = dir.join("vocab.json");
        if !vocab_path.exists() {
            return Err(ExperimentError::Stage {
                stage: "load_data".into(),
                msg: format!("no dataset at {} (run `synth` first)", dir.display()),
            });
        }
        let mut hashes = BTreeMap::new();
        let mut read = |rel: &str| -> Result<PathBuf, ExperimentError> {
            let p = dir.join(rel);
            let bytes = std::fs::read(&p).map_err(ExperimentError::io(&p))?;
            hashes.insert(rel.to_string(), git_hash(&bytes));
            Ok(p)
        };
        let manifest: VocabManifest = serde_json::from_slice(
            &std::fs::read(read("vocab.json")?).map_err(ExperimentError::io(&vocab_path))?,
        )
        .map_err(|e| ExperimentError::Config(format!("vocab.json: {e}")))?;
        if manifest != vocab.manifest() {
            return Err(ExperimentError::Config(format!(
                "dataset vocabulary ({} tokens) does not match the configured task ({} tokens)",
                manifest.size,
                vocab.len()
            )));
        }
        let load = task_err("load_data");
        let mut variant = |name: &str| -> Result<Splits<LabeledExample>, ExperimentError> {
            let mut parts = Vec::new();
            for split in SPLITS {
                let recs: Vec<DemoRecord> = read_jsonl(&read(&format!("{name}/{split}.jsonl"))?).map_err(&load)?;
                parts.push(
                    recs.iter()
                        .map(|r| example_from_record(&vocab, r))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(&load)?,
                );
            }
            let test = parts.pop().unwrap_or_default();
            let val = parts.pop().unwrap_or_default();
            let train = parts.pop().unwrap_or_default();
            Ok(Splits { train, val, test })
        };
        let standard = variant("standard")?;
        let new_problems = variant("new_problems")?;
        let mut prefs = |split: &str| -> Result<Vec<PreferencePair>, ExperimentError> {
            let recs: Vec<PreferenceRecord> = read_jsonl(&read(&format!("preferences/{split}.jsonl"))?).map_err(&load)?;
            recs.iter().map(|r| r.pair(&vocab)).collect::<Result<_, _>>().map_err(&load)
        };
        let prefs_train = prefs("train")?;
        let prefs_val = prefs("val")?;
        let pre: Vec<DemoRecord> = read_jsonl(&read("pretrain.jsonl")?).map_err(&load)?;
        let pretrain = pre
            .iter()
            .map(|r| r.demonstration(&vocab))
            .collect::<Result<_, _>>()
            .map_err(&load)?;
        let style_recs: Vec<StyleRecord> = read_jsonl(&read("style.jsonl")?).map_err(&load)?;
        let style = style_recs
            .iter()
            .map(|r| Ok((vocab.encode(&r.feedback)?, r.professor)))
            .collect::<Result<_, TaskError>>()
            .map_err(&load)?;
        Ok(Self {
            spec,
            vocab,
            standard,
            new_problems,
            prefs_train,
            prefs_val,
            pretrain,
            style,
            hashes,
        })
    }
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, TaskError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Rebuilds the ground truth of a demonstration record from its prompt.
fn example_from_record(vocab: &Vocab, r: &DemoRecord) -> Result<LabeledExample, TaskError> {
    let d = r.demonstration(vocab)?;
    let problem = vocab
        .id(&r.problem_id)
        .and_then(|t| vocab.problem_index(t))
        .ok_or_else(|| TaskError::UnknownToken(r.problem_id.clone()))?;
    let (correct, bug) = prompt_label(vocab, &d.prompt).ok_or_else(|| TaskError::Format {
        line: 0,
        detail: format!("prompt without a unique symptom: {}", r.prompt),
    })?;
    Ok(LabeledExample {
        prompt: d.prompt,
        correct,
        bug,
        problem,
        reference: d.target,
    })
}

/// `synth`: writes every corpus plus the vocabulary manifest under
/// `<out_dir>/data`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Dataset, ExperimentError> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut data = Dataset::synthesize(&cfg)?;
    data.write(&cfg.out_dir.join(DATA_DIR))?;
    Ok(data)
}
