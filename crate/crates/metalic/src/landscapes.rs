//! Synthetic fitness landscapes: additive, NK, pairwise-epistatic, and a
//! mutation-scan family whose labels depend on the (per-task) wild type.
//! These give meta-training something to transfer without any external data.

use crate::rng::substream;
use crate::tasks::{
    standardize_task, Alphabet, FamilyTag, FitnessTask, Record, Sequence, DEFAULT_MAX_LEN,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("insufficient space: {needed} records requested, only {available} distinct mutants")]
    InsufficientSpace { needed: usize, available: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeKind {
    Additive,
    Nk,
    Epistatic,
    /// Weighted mismatch count against the task's wild type plus a small
    /// family-shared symbol preference. The wild type varies per task, so
    /// per-row scoring cannot recover the mismatch term; in-context
    /// consensus can.
    Mutscan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub n_sites: usize,
    pub alphabet_size: usize,
    pub kind: LandscapeKind,
    pub k_neighbors: usize,
    pub noise_std: f64,
    /// Std of per-task Gaussian perturbation of the contribution tables.
    /// Zero means every task in the family shares the exact same oracle.
    pub task_jitter: f64,
    pub rng_seed: u64,
}

impl LandscapeSpec {
    pub fn validate(&self) -> Result<(), LandscapeError> {
        if self.n_sites == 0 {
            return Err(LandscapeError::InvalidSpec("n_sites must be positive".into()));
        }
        if self.alphabet_size < 2 {
            return Err(LandscapeError::InvalidSpec("alphabet_size must be >= 2".into()));
        }
        if self.k_neighbors >= self.n_sites {
            return Err(LandscapeError::InvalidSpec("k_neighbors must be < n_sites".into()));
        }
        if self.noise_std < 0.0 || self.task_jitter < 0.0 {
            return Err(LandscapeError::InvalidSpec("noise/jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// A concrete fitness oracle. Pure function of the sequence.
#[derive(Clone, Debug)]
pub enum Landscape {
    Additive {
        tables: Vec<Vec<f64>>,
    },
    Nk {
        k: usize,
        alphabet_size: usize,
        /// Per site, a table indexed by the site's symbol and its K cyclic
        /// neighbors, mixed-radix in alphabet_size.
        tables: Vec<Vec<f64>>,
    },
    Epistatic {
        tables: Vec<Vec<f64>>,
        pairs: Vec<(usize, usize, Vec<f64>)>,
        alphabet_size: usize,
    },
    Mutscan {
        wild_type: Vec<u8>,
        site_penalty: Vec<f64>,
        symbol_pref: Vec<f64>,
    },
}

impl Landscape {
    pub fn fitness(&self, seq: &Sequence) -> f64 {
        let s = seq.tokens();
        match self {
            Landscape::Additive { tables } => {
                s.iter().enumerate().map(|(i, &a)| tables[i][a as usize]).sum()
            }
            Landscape::Nk { k, alphabet_size, tables } => {
                let n = s.len();
                let mut total = 0.0;
                for i in 0..n {
                    let mut idx = 0usize;
                    for d in 0..=*k {
                        idx = idx * alphabet_size + s[(i + d) % n] as usize;
                    }
                    total += tables[i][idx];
                }
                total / n as f64
            }
            Landscape::Epistatic { tables, pairs, alphabet_size } => {
                let mut total: f64 =
                    s.iter().enumerate().map(|(i, &a)| tables[i][a as usize]).sum();
                for (i, j, e) in pairs {
                    total += e[s[*i] as usize * alphabet_size + s[*j] as usize];
                }
                total
            }
            Landscape::Mutscan { wild_type, site_penalty, symbol_pref } => {
                let mut total = 0.0;
                for (i, &a) in s.iter().enumerate() {
                    if a != wild_type[i] {
                        total -= site_penalty[i];
                    }
                    total += symbol_pref[a as usize];
                }
                total
            }
        }
    }
}

fn additive_tables(spec: &LandscapeSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..spec.n_sites)
        .map(|_| (0..spec.alphabet_size).map(|_| rng.gen::<f64>()).collect())
        .collect()
}

fn build_with_rng(
    spec: &LandscapeSpec,
    rng: &mut ChaCha8Rng,
    wild_type: Option<&[u8]>,
) -> Landscape {
    match spec.kind {
        LandscapeKind::Additive => Landscape::Additive { tables: additive_tables(spec, rng) },
        LandscapeKind::Nk => {
            let size = spec.alphabet_size.pow(spec.k_neighbors as u32 + 1);
            let tables = (0..spec.n_sites)
                .map(|_| (0..size).map(|_| rng.gen::<f64>()).collect())
                .collect();
            Landscape::Nk { k: spec.k_neighbors, alphabet_size: spec.alphabet_size, tables }
        }
        LandscapeKind::Epistatic => {
            let tables = additive_tables(spec, rng);
            let n_pairs = spec.n_sites;
            let mut pairs = Vec::with_capacity(n_pairs);
            for _ in 0..n_pairs {
                let i = rng.gen_range(0..spec.n_sites);
                let mut j = rng.gen_range(0..spec.n_sites);
                while j == i {
                    j = rng.gen_range(0..spec.n_sites);
                }
                let e = (0..spec.alphabet_size * spec.alphabet_size)
                    .map(|_| rng.gen::<f64>() - 0.5)
                    .collect();
                pairs.push((i, j, e));
            }
            Landscape::Epistatic { tables, pairs, alphabet_size: spec.alphabet_size }
        }
        LandscapeKind::Mutscan => {
            let site_penalty: Vec<f64> =
                (0..spec.n_sites).map(|_| 0.5 + rng.gen::<f64>()).collect();
            let symbol_pref: Vec<f64> =
                (0..spec.alphabet_size).map(|_| 0.25 * rng.gen::<f64>()).collect();
            let wt = match wild_type {
                Some(w) => w.to_vec(),
                None => (0..spec.n_sites)
                    .map(|_| rng.gen_range(0..spec.alphabet_size) as u8)
                    .collect(),
            };
            Landscape::Mutscan { wild_type: wt, site_penalty, symbol_pref }
        }
    }
}

/// Deterministic oracle for the spec: same spec and seed, same landscape.
pub fn build_landscape(spec: &LandscapeSpec) -> Result<Landscape, LandscapeError> {
    spec.validate()?;
    let mut rng = substream(spec.rng_seed, "landscape");
    Ok(build_with_rng(spec, &mut rng, None))
}

/// Gaussian perturbation of every table entry, for per-task variation
/// within a family. The mutscan wild type is redrawn by the caller instead.
fn jitter_landscape(ls: &mut Landscape, jitter: f64, rng: &mut impl Rng) {
    if jitter == 0.0 {
        return;
    }
    let gauss = |rng: &mut dyn rand::RngCore| -> f64 {
        // Box-Muller
        let r = rng;
        let u1: f64 = loop {
            let u: f64 = r.gen();
            if u > 0.0 {
                break u;
            }
        };
        let u2: f64 = r.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    match ls {
        Landscape::Additive { tables } | Landscape::Nk { tables, .. } => {
            for t in tables {
                for v in t {
                    *v += jitter * gauss(rng);
                }
            }
        }
        Landscape::Epistatic { tables, pairs, .. } => {
            for t in tables.iter_mut() {
                for v in t {
                    *v += jitter * gauss(rng);
                }
            }
            for (_, _, e) in pairs {
                for v in e {
                    *v += jitter * gauss(rng);
                }
            }
        }
        Landscape::Mutscan { site_penalty, .. } => {
            for v in site_penalty {
                *v += jitter * gauss(rng);
            }
        }
    }
}

/// All sequences at Hamming distance exactly 1 from the wild type:
/// L * (|alphabet| - 1) of them, no duplicates.
pub fn enumerate_single_mutants(wild_type: &Sequence, alphabet: &Alphabet) -> Vec<Sequence> {
    let mut out = Vec::with_capacity(wild_type.len() * (alphabet.size() - 1));
    for i in 0..wild_type.len() {
        for a in 0..alphabet.size() as u8 {
            if a == wild_type.tokens()[i] {
                continue;
            }
            let mut tokens = wild_type.tokens().to_vec();
            tokens[i] = a;
            out.push(Sequence::new(tokens, alphabet, DEFAULT_MAX_LEN).unwrap());
        }
    }
    out
}

/// Count of distinct sequences within `max_mutations` of the wild type,
/// excluding the wild type itself. Saturating.
fn mutant_space(n_sites: usize, alphabet_size: usize, max_mutations: usize) -> u64 {
    let mut total: u64 = 0;
    for m in 1..=max_mutations.min(n_sites) {
        // C(n_sites, m) * (A-1)^m
        let mut c: u64 = 1;
        for i in 0..m {
            c = c.saturating_mul((n_sites - i) as u64) / (i as u64 + 1);
        }
        let mut p: u64 = 1;
        for _ in 0..m {
            p = p.saturating_mul(alphabet_size as u64 - 1);
        }
        total = total.saturating_add(c.saturating_mul(p));
    }
    total
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Build one synthetic task: distinct mutants of a freshly drawn wild type,
/// labeled by the (optionally jittered) oracle plus observation noise, then
/// standardized.
pub fn make_synthetic_task(
    spec: &LandscapeSpec,
    name: &str,
    n_records: usize,
    max_mutations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FitnessTask, LandscapeError> {
    spec.validate()?;
    if max_mutations == 0 {
        return Err(LandscapeError::InvalidSpec("max_mutations must be >= 1".into()));
    }
    let available = mutant_space(spec.n_sites, spec.alphabet_size, max_mutations);
    if (n_records as u64) > available {
        return Err(LandscapeError::InsufficientSpace { needed: n_records, available });
    }
    let alphabet = Arc::new(Alphabet::synthetic(spec.alphabet_size));
    let wt_tokens: Vec<u8> =
        (0..spec.n_sites).map(|_| rng.gen_range(0..spec.alphabet_size) as u8).collect();

    let mut base = substream(spec.rng_seed, "landscape");
    let mut oracle = build_with_rng(spec, &mut base, Some(&wt_tokens));
    jitter_landscape(&mut oracle, spec.task_jitter, rng);

    let wild_type = Sequence::new(wt_tokens.clone(), &alphabet, DEFAULT_MAX_LEN).unwrap();
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut records = Vec::with_capacity(n_records);
    while records.len() < n_records {
        let m = rng.gen_range(1..=max_mutations.min(spec.n_sites));
        let mut tokens = wt_tokens.clone();
        // choose m distinct sites
        let mut sites: Vec<usize> = Vec::with_capacity(m);
        while sites.len() < m {
            let s = rng.gen_range(0..spec.n_sites);
            if !sites.contains(&s) {
                sites.push(s);
            }
        }
        for &s in &sites {
            let mut a = rng.gen_range(0..spec.alphabet_size) as u8;
            while a == wt_tokens[s] {
                a = rng.gen_range(0..spec.alphabet_size) as u8;
            }
            tokens[s] = a;
        }
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let sequence = Sequence::new(tokens, &alphabet, DEFAULT_MAX_LEN).unwrap();
        let fitness = oracle.fitness(&sequence) + spec.noise_std * gaussian(rng);
        records.push(Record { sequence, fitness, aux_score: None, mutant: None });
    }
    let task = FitnessTask {
        name: name.to_string(),
        alphabet,
        wild_type: Some(wild_type),
        records,
        family_tag: if max_mutations == 1 { FamilyTag::SingleMutant } else { FamilyTag::MultiMutant },
    };
    standardize_task(&task)
        .map_err(|e| LandscapeError::InvalidSpec(format!("degenerate generated task: {e}")))
}

/// Deterministic per-task generator for a family: task `index` always yields
/// the same task for the same spec.
pub fn family_task(
    spec: &LandscapeSpec,
    index: usize,
    n_records: usize,
    max_mutations: usize,
) -> Result<FitnessTask, LandscapeError> {
    let name = format!("{:?}-{:03}", spec.kind, index).to_lowercase();
    let mut rng = substream(spec.rng_seed, &format!("task-{index}"));
    make_synthetic_task(spec, &name, n_records, max_mutations, &mut rng)
}
