//! JSON Lines dataset formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::synth::{Demonstration, PreferencePair};
use super::vocab::Vocab;
use super::TaskError;

/// One demonstration per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub prompt: String,
    pub target: String,
    pub split: String,
    pub problem_id: String,
}

/// One preference pair per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub problem_id: String,
}

impl DemoRecord {
    pub fn new(vocab: &Vocab, d: &Demonstration, split: &str, problem: usize) -> Self {
        Self {
            prompt: vocab.decode(&d.prompt),
            target: vocab.decode(&d.target),
            split: split.to_string(),
            problem_id: vocab.decode(&[vocab.problem(problem)]),
        }
    }

    pub fn demonstration(&self, vocab: &Vocab) -> Result<Demonstration, TaskError> {
        Ok(Demonstration {
            prompt: vocab.encode(&self.prompt)?,
            target: vocab.encode(&self.target)?,
        })
    }
}

impl PreferenceRecord {
    pub fn new(vocab: &Vocab, p: &PreferencePair) -> Self {
        Self {
            prompt: vocab.decode(&p.prompt),
            chosen: vocab.decode(&p.chosen),
            rejected: vocab.decode(&p.rejected),
            problem_id: vocab.decode(&[vocab.problem(p.problem)]),
        }
    }

    pub fn pair(&self, vocab: &Vocab) -> Result<PreferencePair, TaskError> {
        let pid = vocab
            .id(&self.problem_id)
            .and_then(|t| vocab.problem_index(t))
            .ok_or_else(|| TaskError::UnknownToken(self.problem_id.clone()))?;
        Ok(PreferencePair {
            prompt: vocab.encode(&self.prompt)?,
            chosen: vocab.encode(&self.chosen)?,
            rejected: vocab.encode(&self.rejected)?,
            problem: pid,
            loser_kind: None,
        })
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, TaskError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TaskError::Format {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::synth::{gen_demonstrations, gen_preferences, SyntheticSpec};

    #[test]
    fn jsonl_round_trip() {
        let spec = SyntheticSpec::default();
        let vocab = spec.vocab().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let demos = gen_demonstrations(&spec, 5, 0).unwrap();
        let recs: Vec<DemoRecord> = demos
            .iter()
            .map(|e| DemoRecord::new(&vocab, &e.demonstration(), "train", e.problem))
            .collect();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<DemoRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[0].demonstration(&vocab).unwrap(), demos[0].demonstration());

        let prefs = gen_preferences(&spec, 3, 0).unwrap();
        let p = PreferenceRecord::new(&vocab, &prefs[0]).pair(&vocab).unwrap();
        assert_eq!((p.prompt, p.chosen, p.problem), (prefs[0].prompt.clone(), prefs[0].chosen.clone(), prefs[0].problem));
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"prompt\":\"a\"}\n").unwrap();
        let err = read_jsonl::<DemoRecord>(&path).unwrap_err();
        assert!(matches!(err, TaskError::Format { line: 1, .. }));
    }
}
