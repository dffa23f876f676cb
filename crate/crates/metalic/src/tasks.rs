//! Core task types: sequences over a finite alphabet, fitness tasks,
//! support/query context batches, and registry splits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_MAX_LEN: usize = 750;
pub const PROTEIN_ALPHABET: &str = "ACDEFGHIKLMNPQRSTVWY";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("degenerate task: {0}")]
    DegenerateTask(String),
    #[error("insufficient data: need {needed} records, task has {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("unknown task: {0}")]
    UnknownTask(String),
    #[error("unknown token {token:?} for alphabet {alphabet:?}")]
    UnknownToken { token: char, alphabet: String },
    #[error("sequence length {len} outside 1..={max}")]
    BadLength { len: usize, max: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Self {
        let symbols: Vec<char> = symbols.into_iter().collect();
        assert!(symbols.len() >= 2, "alphabet needs at least 2 symbols");
        Alphabet { symbols }
    }

    pub fn protein() -> Self {
        Alphabet::new(PROTEIN_ALPHABET.chars())
    }

    /// Synthetic alphabet A, B, C, ... of the given size.
    pub fn synthetic(size: usize) -> Self {
        assert!(size >= 2 && size <= 26);
        Alphabet::new((0..size).map(|i| (b'A' + i as u8) as char))
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, idx: u8) -> char {
        self.symbols[idx as usize]
    }

    pub fn index_of(&self, c: char) -> Option<u8> {
        self.symbols.iter().position(|&s| s == c).map(|i| i as u8)
    }
}

/// A token sequence; tokens are indices into the owning task's alphabet.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<u8>,
}

impl Sequence {
    pub fn new(tokens: Vec<u8>, alphabet: &Alphabet, max_len: usize) -> Result<Self, TaskError> {
        if tokens.is_empty() || tokens.len() > max_len {
            return Err(TaskError::BadLength { len: tokens.len(), max: max_len });
        }
        for &t in &tokens {
            if t as usize >= alphabet.size() {
                return Err(TaskError::UnknownToken {
                    token: (b'?') as char,
                    alphabet: alphabet.symbols.iter().collect(),
                });
            }
        }
        Ok(Sequence { tokens })
    }

    pub fn parse(s: &str, alphabet: &Alphabet, max_len: usize) -> Result<Self, TaskError> {
        let mut tokens = Vec::with_capacity(s.len());
        for c in s.chars() {
            let idx = alphabet.index_of(c).ok_or(TaskError::UnknownToken {
                token: c,
                alphabet: alphabet.symbols.iter().collect(),
            })?;
            tokens.push(idx);
        }
        Sequence::new(tokens, alphabet, max_len)
    }

    pub fn to_string(&self, alphabet: &Alphabet) -> String {
        self.tokens.iter().map(|&t| alphabet.symbol(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn hamming(&self, other: &Sequence) -> usize {
        assert_eq!(self.len(), other.len());
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyTag {
    SingleMutant,
    MultiMutant,
    Synthetic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Record {
    pub sequence: Sequence,
    pub fitness: f64,
    pub aux_score: Option<f64>,
    /// Free-form mutant annotation carried through from input files.
    pub mutant: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitnessTask {
    pub name: String,
    pub alphabet: Arc<Alphabet>,
    pub wild_type: Option<Sequence>,
    pub records: Vec<Record>,
    pub family_tag: FamilyTag,
}

impl FitnessTask {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn max_seq_len(&self) -> usize {
        self.records.iter().map(|r| r.sequence.len()).max().unwrap_or(0)
    }

    pub fn fitness_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fitness).collect()
    }

    pub fn check_distinct(&self) -> Result<(), TaskError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.sequence) {
                return Err(TaskError::DegenerateTask(format!(
                    "task {} has duplicate sequences",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Mean/population-std statistics used for label standardization.
#[derive(Clone, Copy, Debug)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
}

pub fn label_stats(values: &[f64]) -> Result<LabelStats, TaskError> {
    if values.len() < 2 {
        return Err(TaskError::DegenerateTask(format!("{} records, need at least 2", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(TaskError::DegenerateTask("zero fitness variance".into()));
    }
    Ok(LabelStats { mean, std: var.sqrt() })
}

/// Standardize fitness labels to mean 0 / population std 1. Sequences and
/// record order are untouched.
pub fn standardize_task(task: &FitnessTask) -> Result<FitnessTask, TaskError> {
    let stats = label_stats(&task.fitness_values())?;
    let mut out = task.clone();
    for r in &mut out.records {
        r.fitness = (r.fitness - stats.mean) / stats.std;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContextBatch {
    pub support: Vec<(Sequence, f64, Option<f64>)>,
    pub query: Vec<(Sequence, Option<f64>)>,
    /// True query labels, held aside for the loss/metric; never fed to the model.
    pub query_labels: Vec<f64>,
}

impl ContextBatch {
    pub fn n_support(&self) -> usize {
        self.support.len()
    }

    pub fn n_query(&self) -> usize {
        self.query.len()
    }

    pub fn check_disjoint(&self) -> bool {
        let sup: HashSet<&Sequence> = self.support.iter().map(|(s, _, _)| s).collect();
        self.query.iter().all(|(q, _)| !sup.contains(q))
    }
}

/// Draw a disjoint support/query split from a task, without replacement.
pub fn sample_context(
    task: &FitnessTask,
    n_support: usize,
    n_query: usize,
    rng: &mut impl Rng,
) -> Result<ContextBatch, TaskError> {
    assert!(n_query > 0, "query size must be positive");
    let needed = n_support + n_query;
    if needed > task.len() {
        return Err(TaskError::InsufficientData { needed, have: task.len() });
    }
    let mut indices: Vec<usize> = (0..task.len()).collect();
    indices.shuffle(rng);
    let support = indices[..n_support]
        .iter()
        .map(|&i| {
            let r = &task.records[i];
            (r.sequence.clone(), r.fitness, r.aux_score)
        })
        .collect();
    let (query, query_labels) = indices[n_support..needed]
        .iter()
        .map(|&i| {
            let r = &task.records[i];
            ((r.sequence.clone(), r.aux_score), r.fitness)
        })
        .unzip();
    Ok(ContextBatch { support, query, query_labels })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub holdout_task_names: Vec<String>,
    pub rng_seed: u64,
}

/// Partition tasks into (train, test) by explicit holdout names.
pub fn split_registry(
    tasks: Vec<FitnessTask>,
    spec: &SplitSpec,
) -> Result<(Vec<FitnessTask>, Vec<FitnessTask>), TaskError> {
    let names: HashSet<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
    for h in &spec.holdout_task_names {
        if !names.contains(h.as_str()) {
            return Err(TaskError::UnknownTask(h.clone()));
        }
    }
    let holdouts: HashSet<&str> = spec.holdout_task_names.iter().map(|s| s.as_str()).collect();
    let (test, train): (Vec<_>, Vec<_>) =
        tasks.into_iter().partition(|t| holdouts.contains(t.name.as_str()));
    Ok((train, test))
}
