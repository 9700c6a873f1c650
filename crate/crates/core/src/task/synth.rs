use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::*;
use super::TaskError;
use crate::seed;

/// Generator settings for the synthetic feedback task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_bug_types: usize,
    pub n_problems: usize,
    pub n_code_tokens: usize,
    /// Code tokens in each problem statement (fixed per problem).
    pub statement_len: usize,
    /// Code tokens in each student solution (sampled per instance).
    pub solution_len: usize,
    pub buggy_fraction: f64,
    /// Loser mixture: generic+correct, professor+wrong, generic+wrong.
    pub loser_mix: [f64; 3],
    /// Seeds the problem statements.
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_bug_types: 6,
            n_problems: 20,
            n_code_tokens: 12,
            statement_len: 3,
            solution_len: 2,
            buggy_fraction: 0.5,
            loser_mix: [0.5, 0.3, 0.2],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn vocab(&self) -> Result<Vocab, TaskError> {
        Vocab::new(self.n_bug_types, self.n_problems, self.n_code_tokens)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        self.vocab()?;
        if !(0.0..=1.0).contains(&self.buggy_fraction) {
            return Err(TaskError::Config("buggy_fraction must lie in [0,1]".into()));
        }
        let total: f64 = self.loser_mix.iter().sum();
        if self.loser_mix.iter().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(TaskError::Config(
                "loser_mix must be non-negative and sum to 1".into(),
            ));
        }
        if self.statement_len == 0 {
            return Err(TaskError::Config("statement_len must be positive".into()));
        }
        Ok(())
    }

    /// Prompt length: BOS, problem, statement, solution, symptom, SEP.
    pub fn prompt_len(&self) -> usize {
        4 + self.statement_len + self.solution_len
    }

    /// Distinct (problem, solution, symptom) instances this configuration can express.
    pub fn capacity(&self) -> u128 {
        (self.n_problems as u128)
            * (self.n_code_tokens as u128).pow(self.solution_len as u32)
            * (self.n_bug_types as u128 + 1)
    }

    fn statements(&self, vocab: &Vocab) -> Vec<Vec<TokenId>> {
        let mut rng = seed::rng(self.seed, "problem-statements");
        (0..self.n_problems)
            .map(|_| {
                (0..self.statement_len)
                    .map(|_| vocab.code(rng.random_range(0..self.n_code_tokens)))
                    .collect()
            })
            .collect()
    }
}

/// Ground truth carried alongside each prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub prompt: Vec<TokenId>,
    /// `true` when the submission passes its tests.
    pub correct: bool,
    /// 0 for a correct submission, otherwise 1..=K.
    pub bug: usize,
    pub problem: usize,
    pub reference: Vec<TokenId>,
}

impl LabeledExample {
    pub fn demonstration(&self) -> Demonstration {
        Demonstration {
            prompt: self.prompt.clone(),
            target: self.reference.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoserKind {
    GenericCorrect,
    ProfessorWrong,
    GenericWrong,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub problem: usize,
    pub loser_kind: Option<LoserKind>,
}

/// Professor template: PRAISE p DIAG-judgment DIAG b FIX b VERIFY EOS.
pub fn professor_response(vocab: &Vocab, ex_problem: usize, correct: bool, bug: usize) -> Vec<TokenId> {
    let judgment = if correct { CORRECT } else { INCORRECT };
    let b = vocab.bug(bug);
    vec![
        PRAISE,
        vocab.problem(ex_problem),
        judgment,
        DIAG,
        b,
        FIX,
        b,
        VERIFY,
        EOS,
    ]
}

/// Generic template: the judgment plus one or two units drawn from
/// {PRAISE, DIAG b, FIX b, VERIFY, filler word}, in random order.
pub fn generic_response<R: Rng + ?Sized>(
    vocab: &Vocab,
    correct: bool,
    bug: usize,
    rng: &mut R,
) -> Vec<TokenId> {
    let judgment = if correct { CORRECT } else { INCORRECT };
    let b = vocab.bug(bug);
    let mut pool: Vec<Vec<TokenId>> = vec![
        vec![PRAISE],
        vec![DIAG, b],
        vec![FIX, b],
        vec![VERIFY],
        vec![vocab.generic(rng.random_range(0..GENERIC_WORDS.len()))],
    ];
    pool.shuffle(rng);
    let extra = rng.random_range(1..=2);
    let mut units: Vec<Vec<TokenId>> = pool.into_iter().take(extra).collect();
    units.push(vec![judgment]);
    units.shuffle(rng);
    let mut out: Vec<TokenId> = units.concat();
    out.push(EOS);
    out
}

fn sample_instance<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    vocab: &Vocab,
    statements: &[Vec<TokenId>],
    problems: &[usize],
    rng: &mut R,
) -> (Vec<TokenId>, usize, bool, usize) {
    let problem = problems[rng.random_range(0..problems.len())];
    let correct = !rng.random_bool(spec.buggy_fraction);
    let bug = if correct {
        0
    } else {
        rng.random_range(1..=spec.n_bug_types)
    };
    let mut prompt = vec![BOS, vocab.problem(problem)];
    prompt.extend_from_slice(&statements[problem]);
    prompt.extend((0..spec.solution_len).map(|_| vocab.code(rng.random_range(0..spec.n_code_tokens))));
    prompt.push(vocab.symptom(bug));
    prompt.push(SEP);
    (prompt, problem, correct, bug)
}

fn draw_unique<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n: usize,
    problems: &[usize],
    rng: &mut R,
) -> Result<Vec<(Vec<TokenId>, usize, bool, usize)>, TaskError> {
    spec.validate()?;
    if n == 0 {
        return Err(TaskError::Config("corpus size must be at least 1".into()));
    }
    let vocab = spec.vocab()?;
    let capacity = spec.capacity() * problems.len() as u128 / spec.n_problems as u128;
    // Rejection sampling slows sharply near capacity; cap at half.
    if (n as u128) * 2 > capacity {
        return Err(TaskError::Config(format!(
            "requested {n} distinct instances but the vocabulary only supports {capacity}"
        )));
    }
    let statements = spec.statements(&vocab);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let inst = sample_instance(spec, &vocab, &statements, problems, rng);
        if seen.insert(inst.0.clone()) {
            out.push(inst);
        }
    }
    Ok(out)
}

/// Professor demonstrations with unique prompts.
pub fn gen_demonstrations(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>, TaskError> {
    let problems: Vec<usize> = (0..spec.n_problems).collect();
    gen_demonstrations_for(spec, n, seed, &problems)
}

/// As [`gen_demonstrations`], restricted to the given problem indices.
pub fn gen_demonstrations_for(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
    problems: &[usize],
) -> Result<Vec<LabeledExample>, TaskError> {
    let vocab = spec.vocab()?;
    let mut rng = seed::rng(seed, "demonstrations");
    Ok(draw_unique(spec, n, problems, &mut rng)?
        .into_iter()
        .map(|(prompt, problem, correct, bug)| LabeledExample {
            reference: professor_response(&vocab, problem, correct, bug),
            prompt,
            correct,
            bug,
            problem,
        })
        .collect())
}

/// Generic-style, judgment-correct feedback used to pretrain the base model.
pub fn gen_generic_corpus(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Demonstration>, TaskError> {
    let vocab = spec.vocab()?;
    let problems: Vec<usize> = (0..spec.n_problems).collect();
    let mut rng = seed::rng(seed, "generic-corpus");
    let statements = spec.statements(&vocab);
    spec.validate()?;
    Ok((0..n)
        .map(|_| {
            let (prompt, _, correct, bug) =
                sample_instance(spec, &vocab, &statements, &problems, &mut rng);
            let target = generic_response(&vocab, correct, bug, &mut rng);
            Demonstration { prompt, target }
        })
        .collect())
}

/// Preference pairs: professor+correct winner against a mixture of losers.
pub fn gen_preferences(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>, TaskError> {
    let vocab = spec.vocab()?;
    spec.validate()?;
    let problems: Vec<usize> = (0..spec.n_problems).collect();
    let statements = spec.statements(&vocab);
    let mut rng = seed::rng(seed, "preferences");
    let [m0, m1, _] = spec.loser_mix;
    Ok((0..n)
        .map(|_| {
            let (prompt, problem, correct, bug) =
                sample_instance(spec, &vocab, &statements, &problems, &mut rng);
            let chosen = professor_response(&vocab, problem, correct, bug);
            let u: f64 = rng.random();
            let kind = if u < m0 {
                LoserKind::GenericCorrect
            } else if u < m0 + m1 {
                LoserKind::ProfessorWrong
            } else {
                LoserKind::GenericWrong
            };
            let rejected = match kind {
                LoserKind::GenericCorrect => generic_response(&vocab, correct, bug, &mut rng),
                LoserKind::ProfessorWrong => professor_response(&vocab, problem, !correct, bug),
                LoserKind::GenericWrong => generic_response(&vocab, !correct, bug, &mut rng),
            };
            PreferencePair {
                prompt,
                chosen,
                rejected,
                problem,
                loser_kind: Some(kind),
            }
        })
        .collect())
}

/// Labeled professor / non-professor feedback for the style classifier.
/// Non-professor items are generic responses; label `true` is professor.
pub fn gen_style_corpus(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(Vec<TokenId>, bool)>, TaskError> {
    let vocab = spec.vocab()?;
    spec.validate()?;
    let problems: Vec<usize> = (0..spec.n_problems).collect();
    let statements = spec.statements(&vocab);
    let mut rng = seed::rng(seed, "style-corpus");
    Ok((0..n)
        .map(|i| {
            let (_, problem, correct, bug) =
                sample_instance(spec, &vocab, &statements, &problems, &mut rng);
            let professor = i % 2 == 0;
            let judged = if rng.random_bool(0.8) { correct } else { !correct };
            let y = if professor {
                professor_response(&vocab, problem, judged, bug)
            } else {
                generic_response(&vocab, judged, bug, &mut rng)
            };
            (y, professor)
        })
        .collect())
}

/// Ground-truth label read off the prompt's symptom token.
pub fn prompt_label(vocab: &Vocab, prompt: &[TokenId]) -> Option<(bool, usize)> {
    let mut found = prompt.iter().filter_map(|&t| vocab.symptom_index(t));
    let k = found.next()?;
    found.next().is_none().then_some((k == 0, k))
}

/// True iff the markers occur exactly once each, in the order PRAISE, DIAG,
/// FIX, VERIFY, with DIAG and FIX each followed by the same bug token.
pub fn oracle_style(vocab: &Vocab, tokens: &[TokenId]) -> bool {
    let markers: Vec<(usize, TokenId)> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| matches!(t, PRAISE | DIAG | FIX | VERIFY))
        .map(|(i, &t)| (i, t))
        .collect();
    let order: Vec<TokenId> = markers.iter().map(|&(_, t)| t).collect();
    if order != [PRAISE, DIAG, FIX, VERIFY] {
        return false;
    }
    let after = |pos: usize| tokens.get(pos + 1).copied().filter(|&t| vocab.is_bug(t));
    match (after(markers[1].0), after(markers[2].0)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// The unique judgment token, if exactly one is present.
pub fn extract_judgment(tokens: &[TokenId]) -> Option<bool> {
    let mut it = tokens.iter().filter(|&&t| t == CORRECT || t == INCORRECT);
    let first = *it.next()?;
    it.next().is_none().then_some(first == CORRECT)
}

/// True iff exactly one judgment token is present and it matches `correct`.
pub fn oracle_correct(tokens: &[TokenId], correct: bool) -> bool {
    extract_judgment(tokens) == Some(correct)
}
