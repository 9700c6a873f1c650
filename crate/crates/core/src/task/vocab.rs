use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TaskError;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const EOS: TokenId = 3;
pub const PRAISE: TokenId = 4;
pub const DIAG: TokenId = 5;
pub const FIX: TokenId = 6;
pub const VERIFY: TokenId = 7;
pub const CORRECT: TokenId = 8;
pub const INCORRECT: TokenId = 9;
const FIRST_BUG: TokenId = 10;

/// Hard ceiling on the closed vocabulary.
pub const MAX_VOCAB: usize = 64;

pub const GENERIC_WORDS: [&str; 4] = ["ok", "fine", "redo", "wrong"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenClass {
    Special,
    Marker,
    Judgment,
    Bug,
    Symptom,
    Problem,
    Code,
    Generic,
}

/// Closed vocabulary. Layout is a pure function of the three size
/// parameters, so ids are stable across runs and platforms.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    classes: Vec<TokenClass>,
    index: BTreeMap<String, TokenId>,
    n_bug_types: usize,
    n_problems: usize,
    n_code: usize,
}

impl Vocab {
    pub fn new(n_bug_types: usize, n_problems: usize, n_code: usize) -> Result<Self, TaskError> {
        if n_bug_types == 0 || n_problems == 0 || n_code == 0 {
            return Err(TaskError::Config(
                "bug types, problems and code tokens must all be positive".into(),
            ));
        }
        let mut tokens: Vec<(String, TokenClass)> = vec![
            ("<pad>".into(), TokenClass::Special),
            ("<bos>".into(), TokenClass::Special),
            ("<sep>".into(), TokenClass::Special),
            ("<eos>".into(), TokenClass::Special),
            ("PRAISE".into(), TokenClass::Marker),
            ("DIAG".into(), TokenClass::Marker),
            ("FIX".into(), TokenClass::Marker),
            ("VERIFY".into(), TokenClass::Marker),
            ("CORRECT".into(), TokenClass::Judgment),
            ("INCORRECT".into(), TokenClass::Judgment),
        ];
        tokens.extend((0..=n_bug_types).map(|k| (format!("b{k}"), TokenClass::Bug)));
        tokens.extend((0..=n_bug_types).map(|k| (format!("s{k}"), TokenClass::Symptom)));
        tokens.extend((1..=n_problems).map(|p| (format!("p{p}"), TokenClass::Problem)));
        tokens.extend((1..=n_code).map(|c| (format!("c{c}"), TokenClass::Code)));
        tokens.extend(GENERIC_WORDS.iter().map(|w| (w.to_string(), TokenClass::Generic)));
        if tokens.len() > MAX_VOCAB {
            return Err(TaskError::Config(format!(
                "vocabulary of {} tokens exceeds the limit of {MAX_VOCAB}",
                tokens.len()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        let (tokens, classes) = tokens.into_iter().unzip();
        Ok(Self {
            tokens,
            classes,
            index,
            n_bug_types,
            n_problems,
            n_code,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_bug_types(&self) -> usize {
        self.n_bug_types
    }

    pub fn n_problems(&self) -> usize {
        self.n_problems
    }

    pub fn n_code(&self) -> usize {
        self.n_code
    }

    /// Bug token `b{k}`; `k = 0` means "no bug".
    pub fn bug(&self, k: usize) -> TokenId {
        assert!(k <= self.n_bug_types);
        FIRST_BUG + k
    }

    pub fn symptom(&self, k: usize) -> TokenId {
        assert!(k <= self.n_bug_types);
        FIRST_BUG + self.n_bug_types + 1 + k
    }

    /// Problem token for 0-based problem index.
    pub fn problem(&self, j: usize) -> TokenId {
        assert!(j < self.n_problems);
        FIRST_BUG + 2 * (self.n_bug_types + 1) + j
    }

    pub fn code(&self, c: usize) -> TokenId {
        assert!(c < self.n_code);
        self.problem(0) + self.n_problems + c
    }

    pub fn generic(&self, g: usize) -> TokenId {
        assert!(g < GENERIC_WORDS.len());
        self.code(0) + self.n_code + g
    }

    pub fn class(&self, t: TokenId) -> Option<TokenClass> {
        self.classes.get(t).copied()
    }

    pub fn is_bug(&self, t: TokenId) -> bool {
        self.class(t) == Some(TokenClass::Bug)
    }

    pub fn bug_index(&self, t: TokenId) -> Option<usize> {
        self.is_bug(t).then(|| t - FIRST_BUG)
    }

    pub fn symptom_index(&self, t: TokenId) -> Option<usize> {
        (self.class(t) == Some(TokenClass::Symptom)).then(|| t - self.symptom(0))
    }

    pub fn problem_index(&self, t: TokenId) -> Option<usize> {
        (self.class(t) == Some(TokenClass::Problem)).then(|| t - self.problem(0))
    }

    pub fn token(&self, t: TokenId) -> Option<&str> {
        self.tokens.get(t).map(String::as_str)
    }

    pub fn id(&self, s: &str) -> Option<TokenId> {
        self.index.get(s).copied()
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, TaskError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| TaskError::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn manifest(&self) -> VocabManifest {
        VocabManifest {
            size: self.len(),
            tokens: self
                .tokens
                .iter()
                .zip(&self.classes)
                .enumerate()
                .map(|(id, (token, class))| ManifestEntry {
                    id,
                    token: token.clone(),
                    class: *class,
                    politeness_weight: crate::metrics::politeness_weight(token),
                })
                .collect(),
        }
    }
}

/// Serialized token table (`vocab.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub size: usize,
    pub tokens: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: TokenId,
    pub token: String,
    pub class: TokenClass,
    pub politeness_weight: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_fits_and_round_trips() {
        let v = Vocab::new(6, 20, 12).unwrap();
        assert_eq!(v.len(), 60);
        assert_eq!(v.token(v.bug(3)), Some("b3"));
        assert_eq!(v.token(v.symptom(0)), Some("s0"));
        assert_eq!(v.token(v.problem(19)), Some("p20"));
        assert_eq!(v.token(v.code(0)), Some("c1"));
        assert_eq!(v.token(v.generic(3)), Some("wrong"));
        let ids = v.encode("<bos> p3 c2 s1 <sep>").unwrap();
        assert_eq!(v.decode(&ids), "<bos> p3 c2 s1 <sep>");
        assert!(v.encode("nope").is_err());
    }

    #[test]
    fn oversized_vocab_is_rejected() {
        assert!(matches!(Vocab::new(6, 40, 12), Err(TaskError::Config(_))));
    }
}
