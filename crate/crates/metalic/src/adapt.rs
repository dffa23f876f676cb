//! Test-time adaptation. `finetune` sub-samples the support set into
//! disjoint query/support splits per step, optimizes the ranking loss on the
//! query half only, and early-stops on a held-out set. The Reptile routines
//! implement the first-order meta-learning baseline
//! (theta' = theta + beta * mean(theta_T - theta)).

use crate::embed::Provider;
use crate::eval::spearman;
use crate::model::{predict, ModelConfig, ModelError, ModelParams};
use crate::objective::{context_loss, LossConfig, ObjectiveError};
use crate::rng::substream;
use crate::tasks::{ContextBatch, FitnessTask, Sequence};
use crate::tensor::Tensor;
use crate::train::{
    clip_global_norm, init_checkpoint_params, lr_schedule, AdamState, Checkpoint, TrainConfig,
    TrainError,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("fine-tuning undefined on an empty support set; use the zero-shot path")]
    EmptySupport,
    #[error("support too small: {have} points cannot host a query subsample (need >= 2)")]
    SupportTooSmall { have: usize },
    #[error("could not draw a usable subsample after {attempts} tries")]
    SubsampleFailed { attempts: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type SupportPoint = (Sequence, f64, Option<f64>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub skip_warmup: bool,
    /// Warmup steps, used only when `skip_warmup` is false.
    pub warmup_steps: usize,
    /// Targets per step (Q'). Falls back to max(2, floor(N/2)) on small
    /// supports.
    pub subsample_query_size: usize,
    /// In-context rows per step (S'). None = everything left after Q'.
    pub subsample_support_size: Option<usize>,
    pub early_stop_set_size: usize,
    pub early_stop_eval_every: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 100,
            lr: 6e-5,
            skip_warmup: true,
            warmup_steps: 10,
            subsample_query_size: 50,
            subsample_support_size: None,
            early_stop_set_size: 128,
            early_stop_eval_every: 10,
            seed: 0,
        }
    }
}

/// One step's no-memorization audit entry: indices (into the support set)
/// used as targets vs. used as labeled context.
#[derive(Clone, Debug)]
pub struct AuditEntry {
    pub target_indices: Vec<usize>,
    pub context_indices: Vec<usize>,
}

impl AuditEntry {
    pub fn overlap(&self) -> usize {
        self.target_indices.iter().filter(|i| self.context_indices.contains(i)).count()
    }
}

pub struct FinetuneOutcome {
    pub params: ModelParams,
    /// Q' actually used (after the small-support fallback).
    pub q_size: usize,
    pub s_size: usize,
    /// (step, early-stop Spearman) at every evaluation point.
    pub evals: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_spearman: f64,
    pub audit: Vec<AuditEntry>,
    /// Optimizer steps taken (gradient computations).
    pub grad_steps: u64,
}

/// Resolve (Q', S') for a support of size n.
pub fn subsample_sizes(
    n_support: usize,
    config: &FinetuneConfig,
) -> Result<(usize, usize), AdaptError> {
    if n_support == 0 {
        return Err(AdaptError::EmptySupport);
    }
    let q = if n_support >= config.subsample_query_size + 1 {
        config.subsample_query_size
    } else {
        (n_support / 2).max(2)
    };
    if q > n_support.saturating_sub(1) || q < 2 {
        return Err(AdaptError::SupportTooSmall { have: n_support });
    }
    let remainder = n_support - q;
    let s = config.subsample_support_size.map_or(remainder, |s| s.min(remainder)).max(1);
    Ok((q, s))
}

fn predict_chunked(
    params: &ModelParams,
    model_config: &ModelConfig,
    provider: &Provider,
    support: &[SupportPoint],
    points: &[(Sequence, f64, Option<f64>)],
) -> Result<Vec<f64>, ModelError> {
    let mut preds = Vec::with_capacity(points.len());
    for chunk in points.chunks(100) {
        let ctx = ContextBatch {
            support: support.to_vec(),
            query: chunk.iter().map(|(s, _, a)| (s.clone(), *a)).collect(),
            query_labels: chunk.iter().map(|(_, y, _)| *y).collect(),
        };
        preds.extend(predict(params, model_config, provider, &ctx)?);
    }
    Ok(preds)
}

fn early_stop_rho(
    params: &ModelParams,
    model_config: &ModelConfig,
    provider: &Provider,
    support: &[SupportPoint],
    early_stop: &[(Sequence, f64, Option<f64>)],
) -> Result<f64, ModelError> {
    let preds = predict_chunked(params, model_config, provider, support, early_stop)?;
    let labels: Vec<f64> = early_stop.iter().map(|(_, y, _)| *y).collect();
    Ok(spearman(&preds, &labels).rho)
}

/// Fine-tune a checkpoint's parameters on one task's support set (Eq.-4
/// style): each step draws disjoint D^(Q') / D^(S') subsets, pays the
/// ranking loss on D^(Q') only, and the returned parameters are the
/// best-early-stop snapshot.
pub fn finetune(
    checkpoint: &Checkpoint,
    support: &[SupportPoint],
    early_stop_data: &[(Sequence, f64, Option<f64>)],
    provider: &Provider,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome, AdaptError> {
    let model_config = &checkpoint.model_config;
    let (q_size, s_size) = subsample_sizes(support.len(), config)?;
    let early_stop: Vec<_> =
        early_stop_data.iter().take(config.early_stop_set_size).cloned().collect();

    // Fresh optimizer; schedule borrows the meta-training shape (cosine to
    // the same floor) but usually without warmup.
    let schedule = TrainConfig {
        total_steps: config.steps.max(1),
        warmup_steps: if config.skip_warmup { 0 } else { config.warmup_steps.min(config.steps / 2) },
        peak_lr: config.lr,
        ..checkpoint.train_config.clone()
    };
    let mut adam = AdamState::new();
    let mut params = checkpoint.params.clone();
    let mut rng = substream(config.seed, "finetune");
    let frozen_token_table = matches!(provider, Provider::LearnedTable { frozen: true, .. });

    let mut evals = Vec::new();
    let mut audit = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut grad_steps = 0u64;

    let maybe_eval = |step: usize,
                          params: &ModelParams,
                          evals: &mut Vec<(usize, f64)>,
                          best: &mut Option<(usize, f64, ModelParams)>|
     -> Result<(), AdaptError> {
        if early_stop.is_empty() {
            return Ok(());
        }
        let rho = early_stop_rho(params, model_config, provider, support, &early_stop)?;
        evals.push((step, rho));
        // strict > keeps the earliest snapshot on ties
        if best.as_ref().map_or(true, |(_, b, _)| rho > *b) {
            *best = Some((step, rho, params.clone()));
        }
        Ok(())
    };

    maybe_eval(0, &params, &mut evals, &mut best)?;
    let mut indices: Vec<usize> = (0..support.len()).collect();
    for step in 0..config.steps {
        const ATTEMPTS: usize = 20;
        let mut took_step = false;
        for _ in 0..ATTEMPTS {
            indices.shuffle(&mut rng);
            let target_indices = indices[..q_size].to_vec();
            let context_indices = indices[q_size..q_size + s_size].to_vec();
            let labels: Vec<f64> = target_indices.iter().map(|&i| support[i].1).collect();
            if labels.len() >= 2 && labels.iter().all(|&l| l == labels[0]) {
                continue; // no comparable pairs; redraw
            }
            let ctx = ContextBatch {
                support: context_indices.iter().map(|&i| support[i].clone()).collect(),
                query: target_indices.iter().map(|&i| (support[i].0.clone(), support[i].2)).collect(),
                query_labels: labels,
            };
            let (_, mut grads) = context_loss(
                &params,
                model_config,
                provider,
                &checkpoint.loss_config,
                &ctx,
                Some(&mut rng),
            )?;
            if frozen_token_table {
                grads.remove("token_table");
            }
            clip_global_norm(&mut grads, schedule.grad_clip_norm);
            let lr = lr_schedule(step, &schedule)?;
            adam.apply(&mut params, &grads, lr, &schedule);
            grad_steps += 1;
            audit.push(AuditEntry { target_indices, context_indices });
            took_step = true;
            break;
        }
        if !took_step {
            return Err(AdaptError::SubsampleFailed { attempts: ATTEMPTS });
        }
        if (step + 1) % config.early_stop_eval_every.max(1) == 0 {
            maybe_eval(step + 1, &params, &mut evals, &mut best)?;
        }
    }

    let (best_step, best_spearman, best_params) = match best {
        Some((s, r, p)) => (s, r, p),
        // no early-stop data: keep the final parameters
        None => (config.steps, f64::NAN, params),
    };
    Ok(FinetuneOutcome {
        params: best_params,
        q_size,
        s_size,
        evals,
        best_step,
        best_spearman,
        audit,
        grad_steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOpt {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterUpdate {
    /// theta' = theta + beta * mean(theta_T - theta)
    Plain { beta: f64 },
    /// Feed mean(theta - theta_T) / alpha to Adam as a pseudo-gradient.
    AdamOnPseudograd { lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReptileConfig {
    pub inner_steps: usize,
    pub inner_batch: usize,
    pub inner_lr: f64,
    pub inner_opt: InnerOpt,
    pub outer: OuterUpdate,
    pub meta_steps: usize,
    pub task_batch: usize,
    /// true = Metalic-Reptile: inner minibatches are split into in-context
    /// support and query halves. false = plain Reptile: empty support, the
    /// whole minibatch is queries.
    pub in_context_inner: bool,
    pub seed: u64,
}

impl Default for ReptileConfig {
    fn default() -> Self {
        ReptileConfig {
            inner_steps: 3,
            inner_batch: 50,
            inner_lr: 6e-5,
            inner_opt: InnerOpt::Adam,
            outer: OuterUpdate::AdamOnPseudograd { lr: 6e-5 },
            meta_steps: 15_000,
            task_batch: 4,
            in_context_inner: false,
            seed: 0,
        }
    }
}

/// k inner optimization steps on minibatches from one task's data; returns
/// the adapted parameters plus the per-step (loss, gradient) record.
#[allow(clippy::type_complexity)]
pub fn reptile_inner(
    params: &ModelParams,
    support: &[SupportPoint],
    model_config: &ModelConfig,
    provider: &Provider,
    loss_config: &LossConfig,
    config: &ReptileConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, Vec<(f64, HashMap<String, Tensor>)>), AdaptError> {
    if support.is_empty() {
        return Err(AdaptError::EmptySupport);
    }
    let batch = config.inner_batch.min(support.len()).max(2.min(support.len()));
    if batch < 2 {
        return Err(AdaptError::SupportTooSmall { have: support.len() });
    }
    let mut theta = params.clone();
    let mut adam = AdamState::new();
    let sgd_schedule = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::full_scale()
    };
    let mut record = Vec::new();
    let mut indices: Vec<usize> = (0..support.len()).collect();
    for _ in 0..config.inner_steps {
        const ATTEMPTS: usize = 20;
        let mut stepped = false;
        for _ in 0..ATTEMPTS {
            indices.shuffle(rng);
            let mini = &indices[..batch];
            let (ctx_support, targets) = if config.in_context_inner && batch >= 4 {
                let half = batch / 2;
                (&mini[half..], &mini[..half])
            } else {
                (&mini[..0], mini)
            };
            let labels: Vec<f64> = targets.iter().map(|&i| support[i].1).collect();
            if labels.len() >= 2 && labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            let ctx = ContextBatch {
                support: ctx_support.iter().map(|&i| support[i].clone()).collect(),
                query: targets.iter().map(|&i| (support[i].0.clone(), support[i].2)).collect(),
                query_labels: labels,
            };
            let (loss, grads) =
                context_loss(&theta, model_config, provider, loss_config, &ctx, None)?;
            match config.inner_opt {
                InnerOpt::Sgd => {
                    theta.for_each_mut(&mut |name, _, p| {
                        if let Some(g) = grads.get(name) {
                            for (pi, gi) in p.data.iter_mut().zip(&g.data) {
                                *pi -= config.inner_lr * gi;
                            }
                        }
                    });
                }
                InnerOpt::Adam => {
                    adam.apply(&mut theta, &grads, config.inner_lr, &sgd_schedule);
                }
            }
            record.push((loss, grads));
            stepped = true;
            break;
        }
        if !stepped {
            return Err(AdaptError::SubsampleFailed { attempts: ATTEMPTS });
        }
    }
    Ok((theta, record))
}

/// Move theta toward the mean of the adapted parameter sets (Eq.-5 style).
pub fn reptile_outer_update(
    theta: &mut ModelParams,
    adapted: &[ModelParams],
    config: &ReptileConfig,
    outer_adam: &mut AdamState,
) {
    assert!(!adapted.is_empty());
    let n = adapted.len() as f64;
    match &config.outer {
        OuterUpdate::Plain { beta } => {
            let mut i = 0;
            let deltas: Vec<Vec<Tensor>> = adapted
                .iter()
                .map(|a| {
                    let mut v = Vec::new();
                    a.for_each(&mut |_, _, t| v.push(t.clone()));
                    v
                })
                .collect();
            theta.for_each_mut(&mut |_, _, p| {
                for d in 0..p.data.len() {
                    let mean_t: f64 = deltas.iter().map(|v| v[i].data[d]).sum::<f64>() / n;
                    p.data[d] += beta * (mean_t - p.data[d]);
                }
                i += 1;
            });
        }
        OuterUpdate::AdamOnPseudograd { lr } => {
            // pseudo-gradient (theta - mean theta_T) / alpha
            let mut grads: HashMap<String, Tensor> = HashMap::new();
            let mut tensors: Vec<Vec<(String, Tensor)>> = Vec::new();
            for a in adapted {
                let mut v = Vec::new();
                a.for_each(&mut |name, _, t| v.push((name.to_string(), t.clone())));
                tensors.push(v);
            }
            let mut i = 0;
            theta.for_each(&mut |name, _, p| {
                let mut g = Tensor::zeros(p.rows, p.cols);
                for d in 0..p.data.len() {
                    let mean_t: f64 =
                        tensors.iter().map(|v| v[i].1.data[d]).sum::<f64>() / n;
                    g.data[d] = (p.data[d] - mean_t) / config.inner_lr;
                }
                grads.insert(name.to_string(), g);
                i += 1;
            });
            let schedule = TrainConfig { weight_decay: 0.0, ..TrainConfig::full_scale() };
            outer_adam.apply(theta, &grads, *lr, &schedule);
        }
    }
}

pub struct ReptileOutcome {
    pub checkpoint: Checkpoint,
    /// (outer step, mean final inner loss) history.
    pub history: Vec<(usize, f64)>,
}

/// First-order meta-training: per outer step, adapt on a batch of tasks and
/// move toward the mean adapted parameters. The gradient counter advances by
/// `inner_steps` per outer step (a task batch counts once, as in Adam
/// training).
pub fn reptile_meta_train(
    config: &ReptileConfig,
    model_config: &ModelConfig,
    loss_config: &LossConfig,
    train_tasks: &[FitnessTask],
    provider: &Provider,
) -> Result<ReptileOutcome, AdaptError> {
    if train_tasks.is_empty() {
        return Err(AdaptError::Train(TrainError::NoTasks));
    }
    let (params, train_config) = init_checkpoint_params(model_config, provider, config.seed)?;
    let mut ckpt =
        Checkpoint::fresh(model_config.clone(), train_config, loss_config.clone(), params);
    let mut rng = substream(config.seed, "reptile");
    let mut outer_adam = AdamState::new();
    let mut history = Vec::new();
    for step in 0..config.meta_steps {
        let mut adapted = Vec::with_capacity(config.task_batch);
        let mut loss_sum = 0.0;
        for _ in 0..config.task_batch {
            let task = train_tasks.choose(&mut rng).unwrap();
            let support: Vec<SupportPoint> = task
                .records
                .iter()
                .map(|r| (r.sequence.clone(), r.fitness, r.aux_score))
                .collect();
            let (theta_t, record) = reptile_inner(
                &ckpt.params,
                &support,
                model_config,
                provider,
                loss_config,
                config,
                &mut rng,
            )?;
            if let Some((l, _)) = record.last() {
                if !l.is_finite() {
                    return Err(AdaptError::Train(TrainError::NonFiniteLoss {
                        step,
                        diagnostic: None,
                    }));
                }
                loss_sum += l;
            }
            adapted.push(theta_t);
        }
        reptile_outer_update(&mut ckpt.params, &adapted, config, &mut outer_adam);
        ckpt.step += 1;
        ckpt.grad_steps += config.inner_steps as u64;
        history.push((step, loss_sum / config.task_batch as f64));
    }
    Ok(ReptileOutcome { checkpoint: ckpt, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscapes::{family_task, LandscapeKind, LandscapeSpec};
    use crate::model::init_model;
    use crate::tasks::Alphabet;
    use rand::Rng;
    use std::sync::Arc;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            axial_ffn_dim: 12,
            mlp_layers: vec![8],
            attention_dropout: 0.0,
            dropout: 0.0,
            use_aux_channel: false,
            column_attention_enabled: true,
            max_len: 16,
        }
    }

    fn setup() -> (Checkpoint, Provider, Vec<SupportPoint>, Vec<SupportPoint>) {
        let model_config = tiny_model();
        let alphabet = Arc::new(Alphabet::synthetic(4));
        let provider =
            Provider::LearnedTable { alphabet: alphabet.clone(), d_in: 5, frozen: false };
        let mut rng = substream(21, "init");
        let params = init_model(&model_config, 5, Some(4), &mut rng).unwrap();
        let ckpt = Checkpoint::fresh(
            model_config,
            TrainConfig::full_scale(),
            LossConfig::default(),
            params,
        );
        let spec = LandscapeSpec {
            n_sites: 6,
            alphabet_size: 4,
            kind: LandscapeKind::Additive,
            k_neighbors: 0,
            noise_std: 0.05,
            task_jitter: 0.0,
            rng_seed: 23,
        };
        let task = family_task(&spec, 0, 18, 2).unwrap();
        let points: Vec<SupportPoint> =
            task.records.iter().map(|r| (r.sequence.clone(), r.fitness, r.aux_score)).collect();
        let (early, support) = points.split_at(6);
        (ckpt, provider, support.to_vec(), early.to_vec())
    }

    fn ft(steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps,
            lr: 1e-3,
            subsample_query_size: 4,
            early_stop_eval_every: 2,
            seed: 3,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn subsample_arithmetic() {
        let c = FinetuneConfig::default(); // Q'=50
        assert_eq!(subsample_sizes(128, &c).unwrap(), (50, 78));
        assert_eq!(subsample_sizes(16, &c).unwrap(), (8, 8));
        assert!(matches!(subsample_sizes(0, &c), Err(AdaptError::EmptySupport)));
        assert!(matches!(subsample_sizes(1, &c), Err(AdaptError::SupportTooSmall { have: 1 })));
        assert!(matches!(subsample_sizes(2, &c), Err(AdaptError::SupportTooSmall { have: 2 })));
        assert_eq!(subsample_sizes(3, &c).unwrap(), (2, 1));
        // explicit S' is capped by the remainder
        let c2 = FinetuneConfig { subsample_support_size: Some(500), ..c };
        assert_eq!(subsample_sizes(128, &c2).unwrap(), (50, 78));
    }

    #[test]
    fn zero_steps_is_identity() {
        let (ckpt, provider, support, early) = setup();
        let out = finetune(&ckpt, &support, &early, &provider, &ft(0)).unwrap();
        assert_eq!(out.params.named(), ckpt.params.named());
        assert_eq!(out.grad_steps, 0);
        assert_eq!(out.evals.len(), 1); // the step-0 snapshot
    }

    #[test]
    fn no_memorization_audit() {
        let (ckpt, provider, support, early) = setup();
        let out = finetune(&ckpt, &support, &early, &provider, &ft(8)).unwrap();
        assert_eq!(out.audit.len(), 8);
        for entry in &out.audit {
            assert_eq!(entry.overlap(), 0);
            assert_eq!(entry.target_indices.len(), out.q_size);
            assert_eq!(entry.context_indices.len(), out.s_size);
        }
    }

    #[test]
    fn early_stop_returns_best_snapshot() {
        let (ckpt, provider, support, early) = setup();
        let out = finetune(&ckpt, &support, &early, &provider, &ft(8)).unwrap();
        let best = out.evals.iter().cloned().fold(f64::NEG_INFINITY, |a, (_, r)| a.max(r));
        assert_eq!(out.best_spearman, best);
        // earliest tie-break
        let first_best = out.evals.iter().find(|(_, r)| *r == best).unwrap().0;
        assert_eq!(out.best_step, first_best);
        // returned params reproduce the recorded best rho
        let rho = early_stop_rho(
            &out.params,
            &ckpt.model_config,
            &provider,
            &support,
            &early,
        )
        .unwrap();
        assert!((rho - best).abs() < 1e-12);
    }

    #[test]
    fn finetune_deterministic() {
        let (ckpt, provider, support, early) = setup();
        let a = finetune(&ckpt, &support, &early, &provider, &ft(5)).unwrap();
        let b = finetune(&ckpt, &support, &early, &provider, &ft(5)).unwrap();
        assert_eq!(a.params.named(), b.params.named());
        assert_eq!(a.evals, b.evals);
    }

    fn rep(inner_steps: usize, opt: InnerOpt, outer: OuterUpdate) -> ReptileConfig {
        ReptileConfig {
            inner_steps,
            inner_batch: 8,
            inner_lr: 1e-3,
            inner_opt: opt,
            outer,
            meta_steps: 1,
            task_batch: 1,
            in_context_inner: false,
            seed: 5,
        }
    }

    #[test]
    fn reptile_inner_zero_steps_identity() {
        let (ckpt, provider, support, _) = setup();
        let cfg = rep(0, InnerOpt::Sgd, OuterUpdate::Plain { beta: 1.0 });
        let mut rng = substream(1, "t");
        let (theta, rec) = reptile_inner(
            &ckpt.params,
            &support,
            &ckpt.model_config,
            &provider,
            &ckpt.loss_config,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(theta.named(), ckpt.params.named());
        assert!(rec.is_empty());
    }

    #[test]
    fn reptile_single_sgd_step_identity() {
        let (ckpt, provider, support, _) = setup();
        let cfg = rep(1, InnerOpt::Sgd, OuterUpdate::Plain { beta: 1.0 });
        let mut rng = substream(2, "t");
        let (theta, rec) = reptile_inner(
            &ckpt.params,
            &support,
            &ckpt.model_config,
            &provider,
            &ckpt.loss_config,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(rec.len(), 1);
        let grads = &rec[0].1;
        let before = ckpt.params.named();
        let after = theta.named();
        for ((name, _, b), (_, _, a)) in before.iter().zip(after.iter()) {
            let g = &grads[name];
            for i in 0..b.data.len() {
                let expect = b.data[i] - cfg.inner_lr * g.data[i];
                assert!((a.data[i] - expect).abs() < 1e-12, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn outer_plain_beta_one_single_task_assigns() {
        let (ckpt, _, _, _) = setup();
        let mut rng = substream(7, "perturb");
        let mut adapted = ckpt.params.clone();
        adapted.for_each_mut(&mut |_, _, t| {
            for v in &mut t.data {
                *v += rng.gen::<f64>() * 0.01;
            }
        });
        let cfg = rep(1, InnerOpt::Sgd, OuterUpdate::Plain { beta: 1.0 });
        let mut theta = ckpt.params.clone();
        let mut adam = AdamState::new();
        reptile_outer_update(&mut theta, std::slice::from_ref(&adapted), &cfg, &mut adam);
        let want = adapted.named();
        let got = theta.named();
        for ((_, _, w), (_, _, g)) in want.iter().zip(got.iter()) {
            for (a, b) in w.data.iter().zip(&g.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // beta = 0 leaves theta untouched
        let cfg0 = rep(1, InnerOpt::Sgd, OuterUpdate::Plain { beta: 0.0 });
        let mut theta0 = ckpt.params.clone();
        reptile_outer_update(&mut theta0, std::slice::from_ref(&adapted), &cfg0, &mut adam);
        assert_eq!(theta0.named(), ckpt.params.named());
    }

    #[test]
    fn composite_k1_plain_equals_scaled_sgd() {
        let (ckpt, provider, support, _) = setup();
        let beta = 0.7;
        let cfg = rep(1, InnerOpt::Sgd, OuterUpdate::Plain { beta });
        let mut rng = substream(4, "t");
        let (theta_t, rec) = reptile_inner(
            &ckpt.params,
            &support,
            &ckpt.model_config,
            &provider,
            &ckpt.loss_config,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let mut theta = ckpt.params.clone();
        let mut adam = AdamState::new();
        reptile_outer_update(&mut theta, std::slice::from_ref(&theta_t), &cfg, &mut adam);
        let grads = &rec[0].1;
        let before = ckpt.params.named();
        let after = theta.named();
        for ((name, _, b), (_, _, a)) in before.iter().zip(after.iter()) {
            let g = &grads[name];
            for i in 0..b.data.len() {
                let expect = b.data[i] - beta * cfg.inner_lr * g.data[i];
                assert!((a.data[i] - expect).abs() < 1e-7, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn adam_pseudograd_zero_delta_is_noop() {
        let (ckpt, _, _, _) = setup();
        let cfg = rep(1, InnerOpt::Sgd, OuterUpdate::AdamOnPseudograd { lr: 1e-3 });
        let mut theta = ckpt.params.clone();
        let mut adam = AdamState::new();
        let same = ckpt.params.clone();
        reptile_outer_update(&mut theta, std::slice::from_ref(&same), &cfg, &mut adam);
        assert_eq!(theta.named(), ckpt.params.named());
    }

    #[test]
    fn reptile_meta_train_counter_and_progress() {
        let model_config = tiny_model();
        let alphabet = Arc::new(Alphabet::synthetic(4));
        let provider =
            Provider::LearnedTable { alphabet: alphabet.clone(), d_in: 5, frozen: false };
        let spec = LandscapeSpec {
            n_sites: 6,
            alphabet_size: 4,
            kind: LandscapeKind::Additive,
            k_neighbors: 0,
            noise_std: 0.05,
            task_jitter: 0.1,
            rng_seed: 29,
        };
        let tasks: Vec<FitnessTask> =
            (0..3).map(|i| family_task(&spec, i, 16, 1).unwrap()).collect();
        let cfg = ReptileConfig {
            inner_steps: 3,
            inner_batch: 8,
            inner_lr: 1e-3,
            inner_opt: InnerOpt::Adam,
            outer: OuterUpdate::Plain { beta: 0.5 },
            meta_steps: 5,
            task_batch: 2,
            in_context_inner: false,
            seed: 11,
        };
        let out = reptile_meta_train(
            &cfg,
            &model_config,
            &LossConfig::default(),
            &tasks,
            &provider,
        )
        .unwrap();
        assert_eq!(out.checkpoint.step, 5);
        assert_eq!(out.checkpoint.grad_steps, 15); // 5 outer x 3 inner
        assert_eq!(out.history.len(), 5);
        assert!(out.history.iter().all(|(_, l)| l.is_finite()));
    }
}
