//! Ranking objectives. The preference loss treats each context's query set
//! as a batch of pairwise comparisons: for every ordered pair with y_i > y_j
//! the model pays -log sigma(v_i - v_j).

use crate::autodiff::{sigmoid, softplus, Tape};
use crate::embed::Provider;
use crate::model::{
    assemble_grid, forward, ModelConfig, ModelError, ModelParams, ParamVars,
};
use crate::tasks::ContextBatch;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("context has no comparable query pairs (need >= 2 distinct labels)")]
    NoComparablePairs,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Preference,
    /// The NoPref ablation: plain regression on standardized labels.
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Divide the preference loss by the number of pairs so contexts with
    /// different query counts weigh equally in a batch.
    pub normalize_by_pairs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Preference, normalize_by_pairs: true }
    }
}

/// P(i beats j) = sigma(v_i - v_j).
pub fn pairwise_prob(v_i: f64, v_j: f64) -> f64 {
    sigmoid(v_i - v_j)
}

/// Ordered (winner, loser) index pairs: every (i, j) with y_i > y_j.
pub fn preference_pairs(labels: &[f64]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] > labels[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Raw pair-summed preference loss: sum over y_i > y_j of
/// -log sigma(v_i - v_j), computed as softplus(v_j - v_i) for stability.
pub fn preference_loss(scores: &[f64], labels: &[f64]) -> f64 {
    preference_pairs(labels)
        .iter()
        .map(|&(w, l)| softplus(scores[l] - scores[w]))
        .sum()
}

/// Mean squared error.
pub fn mse_loss(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let n = scores.len() as f64;
    scores.iter().zip(labels).map(|(s, y)| (s - y) * (s - y)).sum::<f64>() / n
}

/// Loss and per-parameter gradients for one context. Dropout fires only when
/// an rng is supplied.
pub fn context_loss(
    params: &ModelParams,
    model_config: &ModelConfig,
    provider: &Provider,
    loss_config: &LossConfig,
    context: &ContextBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, HashMap<String, Tensor>), ObjectiveError> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let grid = assemble_grid(&mut tape, params, &vars, model_config, provider, context)?;
    let out = forward(&mut tape, params, &vars, model_config, &grid, dropout_rng, false)?;
    let loss = match loss_config.kind {
        LossKind::Preference => {
            let pairs = preference_pairs(&context.query_labels);
            if pairs.is_empty() {
                return Err(ObjectiveError::NoComparablePairs);
            }
            let scale =
                if loss_config.normalize_by_pairs { 1.0 / pairs.len() as f64 } else { 1.0 };
            tape.preference_loss(out.scores, pairs, scale)
        }
        LossKind::Mse => tape.mse_loss(out.scores, context.query_labels.clone()),
    };
    let loss_val = tape.value(loss).data[0];
    if !loss_val.is_finite() {
        return Err(ObjectiveError::Model(ModelError::NonFiniteActivation));
    }
    let grads = tape.backward(loss);
    Ok((loss_val, vars.gradients(params, &grads)))
}

/// Mean loss and mean gradients over a batch of contexts (the meta-objective
/// estimate for one optimizer step).
pub fn meta_objective(
    params: &ModelParams,
    model_config: &ModelConfig,
    provider: &Provider,
    loss_config: &LossConfig,
    contexts: &[ContextBatch],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, HashMap<String, Tensor>), ObjectiveError> {
    assert!(!contexts.is_empty());
    let mut total = 0.0;
    let mut acc: HashMap<String, Tensor> = HashMap::new();
    for ctx in contexts {
        let (l, g) = context_loss(
            params,
            model_config,
            provider,
            loss_config,
            ctx,
            dropout_rng.as_deref_mut(),
        )?;
        total += l;
        for (k, t) in g {
            acc.entry(k).and_modify(|a| a.add_assign(&t)).or_insert(t);
        }
    }
    let inv = 1.0 / contexts.len() as f64;
    for t in acc.values_mut() {
        t.scale_assign(inv);
    }
    Ok((total * inv, acc))
}
