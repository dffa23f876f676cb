//! Spearman scoring, the benchmark protocol (support resampling, 100-point
//! query chunks, 2,000-point cap), ablation configurations, and report
//! aggregation.

use crate::adapt::{finetune, AdaptError, FinetuneConfig, SupportPoint};
use crate::model::{predict, ModelConfig, ModelError};
use crate::objective::LossKind;
use crate::rng::substream;
use crate::tasks::{ContextBatch, FitnessTask};
use crate::train::{Checkpoint, TrainConfig};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {task} too small: needs {needed} points, has {have}")]
    TaskTooSmall { task: String, needed: usize, have: usize },
    #[error("unknown ablation {name:?}")]
    UnknownAblation { name: String },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Set when either input is constant; rho is reported as 0.
    pub degenerate: bool,
}

/// Average fractional ranks: ties share the mean of their rank range.
fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson on tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> SpearmanResult {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "need at least 2 points");
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return SpearmanResult { rho: 0.0, degenerate: true };
    }
    SpearmanResult { rho: cov / (va * vb).sqrt(), degenerate: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub shots: Vec<usize>,
    /// N^(Q): queries per scored chunk; remainders are dropped.
    pub query_chunk: usize,
    pub early_stop_size: usize,
    pub max_points: usize,
    pub support_resamples: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            shots: vec![0, 16, 128],
            query_chunk: 100,
            early_stop_size: 128,
            max_points: 2_000,
            support_resamples: 3,
            seeds: vec![0],
        }
    }
}

/// Points scored / dropped for a task of `task_len` points under the chunked
/// protocol. Returns (scored, dropped, n_chunks).
pub fn chunk_accounting(
    task_len: usize,
    shot: usize,
    early_stop: usize,
    chunk: usize,
    max_points: usize,
) -> (usize, usize, usize) {
    let rest = task_len.saturating_sub(shot + early_stop);
    let n_chunks = rest.min(max_points) / chunk;
    let scored = n_chunks * chunk;
    (scored, rest - scored, n_chunks)
}

/// A prepared prediction source for one task evaluation. `prepare` runs once
/// per support resample (adaptation happens there); `score` must ignore the
/// labels carried in the chunk.
pub trait TaskScorer {
    /// Returns the number of gradient computations performed.
    fn prepare(
        &mut self,
        support: &[SupportPoint],
        early_stop: &[SupportPoint],
    ) -> Result<u64, EvalError>;
    fn score(
        &self,
        support: &[SupportPoint],
        chunk: &[SupportPoint],
    ) -> Result<Vec<f64>, EvalError>;
}

/// Scores with a checkpoint's model, optionally fine-tuning per resample.
pub struct ModelScorer<'a> {
    pub checkpoint: &'a Checkpoint,
    pub provider: &'a crate::embed::Provider,
    pub finetune: Option<FinetuneConfig>,
    params: crate::model::ModelParams,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        checkpoint: &'a Checkpoint,
        provider: &'a crate::embed::Provider,
        finetune: Option<FinetuneConfig>,
    ) -> Self {
        let params = checkpoint.params.clone();
        ModelScorer { checkpoint, provider, finetune, params }
    }
}

impl TaskScorer for ModelScorer<'_> {
    fn prepare(
        &mut self,
        support: &[SupportPoint],
        early_stop: &[SupportPoint],
    ) -> Result<u64, EvalError> {
        match (&self.finetune, support.is_empty()) {
            (Some(cfg), false) => {
                let out = finetune(self.checkpoint, support, early_stop, self.provider, cfg)?;
                self.params = out.params;
                Ok(out.grad_steps)
            }
            _ => {
                self.params = self.checkpoint.params.clone();
                Ok(0)
            }
        }
    }

    fn score(
        &self,
        support: &[SupportPoint],
        chunk: &[SupportPoint],
    ) -> Result<Vec<f64>, EvalError> {
        let ctx = ContextBatch {
            support: support.to_vec(),
            query: chunk.iter().map(|(s, _, a)| (s.clone(), *a)).collect(),
            query_labels: vec![0.0; chunk.len()],
        };
        Ok(predict(&self.params, &self.checkpoint.model_config, self.provider, &ctx)?)
    }
}

/// Scores every point with its true label: the plumbing oracle (rho must
/// come out 1).
pub struct OracleScorer;

impl TaskScorer for OracleScorer {
    fn prepare(&mut self, _: &[SupportPoint], _: &[SupportPoint]) -> Result<u64, EvalError> {
        Ok(0)
    }

    fn score(&self, _: &[SupportPoint], chunk: &[SupportPoint]) -> Result<Vec<f64>, EvalError> {
        Ok(chunk.iter().map(|(_, y, _)| *y).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResampleResult {
    pub rho: f64,
    pub degenerate: bool,
    pub scored: usize,
    pub dropped: usize,
    pub grad_steps: u64,
}

/// Evaluate one task at one shot setting: per support resample, draw support
/// and a disjoint early-stop set, adapt, score the remaining points in
/// chunks, and compute one rho over the concatenation.
pub fn evaluate_task(
    scorer: &mut dyn TaskScorer,
    task: &FitnessTask,
    shot: usize,
    protocol: &EvalProtocol,
    seed: u64,
    merge_early_stop_into_support: bool,
) -> Result<Vec<ResampleResult>, EvalError> {
    let needed = shot + protocol.early_stop_size + protocol.query_chunk;
    if task.len() < needed {
        return Err(EvalError::TaskTooSmall {
            task: task.name.clone(),
            needed,
            have: task.len(),
        });
    }
    let points: Vec<SupportPoint> = task
        .records
        .iter()
        .map(|r| (r.sequence.clone(), r.fitness, r.aux_score))
        .collect();
    let mut results = Vec::with_capacity(protocol.support_resamples);
    for resample in 0..protocol.support_resamples {
        let mut rng = substream(seed, &format!("eval-{}-{}", task.name, resample));
        let mut indices: Vec<usize> = (0..points.len()).collect();
        indices.shuffle(&mut rng);
        let support: Vec<SupportPoint> =
            indices[..shot].iter().map(|&i| points[i].clone()).collect();
        // reserved even at shot 0 so scored populations match across shots
        let early_stop: Vec<SupportPoint> = indices[shot..shot + protocol.early_stop_size]
            .iter()
            .map(|&i| points[i].clone())
            .collect();
        let rest: Vec<SupportPoint> = indices[shot + protocol.early_stop_size..]
            .iter()
            .map(|&i| points[i].clone())
            .collect();
        let (scored, dropped, n_chunks) = chunk_accounting(
            task.len(),
            shot,
            protocol.early_stop_size,
            protocol.query_chunk,
            protocol.max_points,
        );
        debug_assert_eq!(scored + dropped + shot + protocol.early_stop_size, task.len());

        // NoFT fairness rule: the unused early-stop points join the context
        let context_support: Vec<SupportPoint> = if merge_early_stop_into_support {
            support.iter().chain(early_stop.iter()).cloned().collect()
        } else {
            support.clone()
        };
        let grad_steps = if merge_early_stop_into_support {
            scorer.prepare(&context_support, &[])?
        } else {
            scorer.prepare(&support, &early_stop)?
        };

        let mut preds = Vec::with_capacity(scored);
        let mut labels = Vec::with_capacity(scored);
        for c in 0..n_chunks {
            let chunk = &rest[c * protocol.query_chunk..(c + 1) * protocol.query_chunk];
            preds.extend(scorer.score(&context_support, chunk)?);
            labels.extend(chunk.iter().map(|(_, y, _)| *y));
        }
        let s = spearman(&preds, &labels);
        results.push(ResampleResult {
            rho: s.rho,
            degenerate: s.degenerate,
            scored,
            dropped,
            grad_steps,
        });
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoIcl,
    NoFt,
    NoPref,
    NoMetaTrain,
    NoAug,
    AuxChannel,
}

impl std::str::FromStr for Ablation {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        match s.to_ascii_lowercase().as_str() {
            "noicl" | "no-icl" => Ok(Ablation::NoIcl),
            "noft" | "no-ft" => Ok(Ablation::NoFt),
            "nopref" | "no-pref" => Ok(Ablation::NoPref),
            "nometatrain" | "no-meta-train" => Ok(Ablation::NoMetaTrain),
            "noaug" | "no-aug" => Ok(Ablation::NoAug),
            "auxchannel" | "aux-channel" => Ok(Ablation::AuxChannel),
            other => Err(EvalError::UnknownAblation { name: other.to_string() }),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Ablation::NoIcl => "no-icl",
            Ablation::NoFt => "no-ft",
            Ablation::NoPref => "no-pref",
            Ablation::NoMetaTrain => "no-meta-train",
            Ablation::NoAug => "no-aug",
            Ablation::AuxChannel => "aux-channel",
        };
        f.write_str(s)
    }
}

/// Configuration deltas for one ablation. Flags not expressible as config
/// edits (fresh init, fine-tuning disabled, early-stop merge) are carried
/// separately for the evaluation driver.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationDeltas {
    pub column_attention_enabled: Option<bool>,
    pub loss_kind: Option<LossKind>,
    pub use_aux_channel: Option<bool>,
    pub single_family_mix: bool,
    pub fresh_init: bool,
    pub disable_finetune: bool,
    pub merge_early_stop_into_support: bool,
}

pub fn build_ablation(ablation: Ablation) -> AblationDeltas {
    let mut d = AblationDeltas::default();
    match ablation {
        Ablation::NoIcl => d.column_attention_enabled = Some(false),
        Ablation::NoFt => {
            d.disable_finetune = true;
            d.merge_early_stop_into_support = true;
        }
        Ablation::NoPref => d.loss_kind = Some(LossKind::Mse),
        Ablation::NoMetaTrain => d.fresh_init = true,
        Ablation::NoAug => d.single_family_mix = true,
        Ablation::AuxChannel => d.use_aux_channel = Some(true),
    }
    d
}

impl AblationDeltas {
    pub fn apply(
        &self,
        model_config: &mut ModelConfig,
        train_config: &mut TrainConfig,
        finetune_config: &mut Option<FinetuneConfig>,
    ) {
        if let Some(v) = self.column_attention_enabled {
            model_config.column_attention_enabled = v;
        }
        if let Some(v) = self.use_aux_channel {
            model_config.use_aux_channel = v;
        }
        if self.single_family_mix {
            train_config.task_mix.truncate(1);
        }
        if self.disable_finetune {
            *finetune_config = None;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalLeaf {
    pub task: String,
    pub shot: usize,
    pub seed: u64,
    pub resample: usize,
    pub rho: f64,
    pub degenerate: bool,
    pub scored: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShotAggregate {
    pub shot: usize,
    /// Mean over resamples and seeds, per task.
    pub per_task: BTreeMap<String, f64>,
    /// Mean over tasks of per-task resample means, per seed.
    pub per_seed: BTreeMap<String, f64>,
    /// Mean and population std of the per-seed means.
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub ablations: Vec<String>,
    pub grad_steps: u64,
    pub leaves: Vec<EvalLeaf>,
    pub aggregates: Vec<ShotAggregate>,
    pub config_echo: serde_json::Value,
}

/// Hierarchical means: resamples -> task, tasks -> run (per seed), seeds ->
/// mean +- population std.
pub fn aggregate(leaves: &[EvalLeaf]) -> Vec<ShotAggregate> {
    let mut shots: Vec<usize> = leaves.iter().map(|l| l.shot).collect();
    shots.sort_unstable();
    shots.dedup();
    let mut out = Vec::new();
    for shot in shots {
        // (seed, task) -> resample rhos
        let mut cells: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
        for l in leaves.iter().filter(|l| l.shot == shot) {
            cells.entry((l.seed, l.task.clone())).or_default().push(l.rho);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut per_seed_tasks: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        let mut per_task_means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ((seed, task), rhos) in &cells {
            let m = mean(rhos);
            per_seed_tasks.entry(*seed).or_default().push(m);
            per_task_means.entry(task.clone()).or_default().push(m);
        }
        let per_seed: BTreeMap<String, f64> =
            per_seed_tasks.iter().map(|(s, v)| (s.to_string(), mean(v))).collect();
        let per_task: BTreeMap<String, f64> =
            per_task_means.iter().map(|(t, v)| (t.clone(), mean(v))).collect();
        let seed_means: Vec<f64> = per_seed.values().copied().collect();
        let m = mean(&seed_means);
        let var =
            seed_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / seed_means.len() as f64;
        out.push(ShotAggregate { shot, per_task, per_seed, mean: m, std: var.sqrt() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscapes::{family_task, LandscapeKind, LandscapeSpec};

    #[test]
    fn spearman_oracles() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).rho, 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).rho, -1.0);
        // tie-averaged ranks: hand-verified Pearson of [1, 2.5, 2.5, 4] vs [1,2,3,4]
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert!((r.rho - 0.948_683).abs() < 1e-6);
        assert!(!r.degenerate);
    }

    #[test]
    fn spearman_degenerate_flagged() {
        let r = spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(r.rho, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn spearman_symmetric_and_monotone_invariant() {
        let a = [0.3, -1.2, 0.8, 0.0, 2.5, -0.7];
        let b = [1.0, 0.2, 0.9, -0.4, 0.5, 0.1];
        let ab = spearman(&a, &b).rho;
        assert_eq!(ab, spearman(&b, &a).rho);
        let mapped: Vec<f64> = a.iter().map(|x| (3.0 * x).exp() + 7.0).collect();
        assert_eq!(spearman(&mapped, &b).rho, ab);
    }

    #[test]
    fn chunk_accounting_spec_examples() {
        // 2,500 points at shot 128: cap at 2,000 -> 20 chunks, 244 unused
        assert_eq!(chunk_accounting(2_500, 128, 128, 100, 2_000), (2_000, 244, 20));
        // 356 points at shot 0: 228 remaining -> 2 chunks, 28 dropped
        assert_eq!(chunk_accounting(356, 0, 128, 100, 2_000), (200, 28, 2));
    }

    fn test_task(n: usize) -> FitnessTask {
        let spec = LandscapeSpec {
            n_sites: 8,
            alphabet_size: 6,
            kind: LandscapeKind::Additive,
            k_neighbors: 0,
            noise_std: 0.0,
            task_jitter: 0.0,
            rng_seed: 31,
        };
        family_task(&spec, 0, n, 2).unwrap()
    }

    fn small_protocol() -> EvalProtocol {
        EvalProtocol {
            shots: vec![0, 6],
            query_chunk: 10,
            early_stop_size: 8,
            max_points: 40,
            support_resamples: 2,
            seeds: vec![0],
        }
    }

    #[test]
    fn oracle_scorer_perfect_rho_and_accounting() {
        let task = test_task(77);
        let protocol = small_protocol();
        let results =
            evaluate_task(&mut OracleScorer, &task, 6, &protocol, 0, false).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.rho, 1.0);
            assert_eq!(r.scored, 40); // 63 rest capped at 40 -> 4 chunks
            assert_eq!(r.dropped, 23);
            assert_eq!(r.grad_steps, 0);
            assert_eq!(r.scored + r.dropped + 6 + 8, task.len());
        }
    }

    #[test]
    fn zero_shot_reserves_early_stop() {
        let task = test_task(77);
        let protocol = small_protocol();
        let results =
            evaluate_task(&mut OracleScorer, &task, 0, &protocol, 0, false).unwrap();
        for r in &results {
            // 69 rest capped at 40
            assert_eq!(r.scored, 40);
            assert_eq!(r.dropped, 29);
        }
    }

    #[test]
    fn task_too_small() {
        let task = test_task(20);
        let protocol = small_protocol();
        let e = evaluate_task(&mut OracleScorer, &task, 6, &protocol, 0, false);
        assert!(matches!(e, Err(EvalError::TaskTooSmall { needed: 24, have: 20, .. })));
    }

    #[test]
    fn evaluation_deterministic_across_calls() {
        let task = test_task(60);
        let protocol = small_protocol();
        let a = evaluate_task(&mut OracleScorer, &task, 6, &protocol, 7, false).unwrap();
        let b = evaluate_task(&mut OracleScorer, &task, 6, &protocol, 7, false).unwrap();
        let ra: Vec<f64> = a.iter().map(|r| r.rho).collect();
        let rb: Vec<f64> = b.iter().map(|r| r.rho).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn ablation_parsing_and_deltas() {
        use std::str::FromStr;
        assert_eq!(Ablation::from_str("NoICL").unwrap(), Ablation::NoIcl);
        assert_eq!(Ablation::from_str("no-ft").unwrap(), Ablation::NoFt);
        assert!(matches!(
            Ablation::from_str("bogus"),
            Err(EvalError::UnknownAblation { .. })
        ));
        assert_eq!(build_ablation(Ablation::NoIcl).column_attention_enabled, Some(false));
        let noft = build_ablation(Ablation::NoFt);
        assert!(noft.disable_finetune && noft.merge_early_stop_into_support);
        assert_eq!(build_ablation(Ablation::NoPref).loss_kind, Some(LossKind::Mse));
        assert!(build_ablation(Ablation::NoMetaTrain).fresh_init);
        assert!(build_ablation(Ablation::NoAug).single_family_mix);
        assert_eq!(build_ablation(Ablation::AuxChannel).use_aux_channel, Some(true));
    }

    #[test]
    fn noft_merges_early_stop_into_context() {
        struct Probe {
            prepared_support: usize,
            prepared_early: usize,
        }
        impl TaskScorer for Probe {
            fn prepare(
                &mut self,
                support: &[SupportPoint],
                early: &[SupportPoint],
            ) -> Result<u64, EvalError> {
                self.prepared_support = support.len();
                self.prepared_early = early.len();
                Ok(0)
            }
            fn score(
                &self,
                _: &[SupportPoint],
                chunk: &[SupportPoint],
            ) -> Result<Vec<f64>, EvalError> {
                Ok(chunk.iter().map(|(_, y, _)| *y).collect())
            }
        }
        let task = test_task(77);
        let protocol = small_protocol();
        let mut probe = Probe { prepared_support: 0, prepared_early: 0 };
        evaluate_task(&mut probe, &task, 6, &protocol, 0, true).unwrap();
        assert_eq!(probe.prepared_support, 6 + 8);
        assert_eq!(probe.prepared_early, 0);
    }

    #[test]
    fn aggregate_spec_example() {
        let mk = |seed: u64, rho: f64| EvalLeaf {
            task: "t".into(),
            shot: 0,
            seed,
            resample: 0,
            rho,
            degenerate: false,
            scored: 10,
            dropped: 0,
        };
        let leaves = vec![mk(0, 0.48), mk(1, 0.48), mk(2, 0.49)];
        let agg = aggregate(&leaves);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean - 0.483_333_3).abs() < 1e-6);
        assert!((agg[0].std - 0.004_714).abs() < 1e-5);
        // permutation invariance over seeds
        let mut shuffled = leaves.clone();
        shuffled.reverse();
        let agg2 = aggregate(&shuffled);
        assert_eq!(agg[0].mean, agg2[0].mean);
        assert_eq!(agg[0].std, agg2[0].std);
        // single seed -> std 0
        let single = aggregate(&leaves[..1]);
        assert_eq!(single[0].std, 0.0);
    }

    #[test]
    fn aggregate_hierarchical_means() {
        // two tasks, one seed: task means average resamples first
        let mk = |task: &str, resample: usize, rho: f64| EvalLeaf {
            task: task.into(),
            shot: 16,
            seed: 0,
            resample,
            rho,
            degenerate: false,
            scored: 10,
            dropped: 0,
        };
        let leaves = vec![
            mk("a", 0, 0.2),
            mk("a", 1, 0.4), // task a mean 0.3
            mk("b", 0, 0.8), // task b mean 0.8
        ];
        let agg = aggregate(&leaves);
        assert!((agg[0].per_task["a"] - 0.3).abs() < 1e-12);
        assert!((agg[0].per_task["b"] - 0.8).abs() < 1e-12);
        assert!((agg[0].mean - 0.55).abs() < 1e-12);
    }
}
