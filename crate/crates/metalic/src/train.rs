//! Meta-training: AdamW-style updates on the batch-mean context loss, with
//! linear warmup into cosine decay, global gradient clipping, and resumable
//! checkpoints.

use crate::embed::Provider;
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::objective::{meta_objective, LossConfig, ObjectiveError};
use crate::rng::substream;
use crate::tasks::{sample_context, ContextBatch, FamilyTag, FitnessTask, TaskError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("schedule step {step} out of range (total {total})")]
    OutOfRange { step: usize, total: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}{}", diagnostic.as_ref().map(|p| format!(" (diagnostic checkpoint: {})", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: usize, diagnostic: Option<PathBuf> },
    #[error("could not sample a usable context from task {task} after {attempts} tries")]
    ContextSampling { task: String, attempts: usize },
    #[error("no train tasks")]
    NoTasks,
    #[error("checkpoint format error in {path}: {message}")]
    BadCheckpoint { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr_fraction: f64,
    /// Contexts per optimizer step (gradient accumulation across contexts).
    pub batch_size: usize,
    /// Decoupled, non-bias tensors only.
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Support sizes drawn uniformly per context, each capped by task size.
    pub n_support_choices: Vec<usize>,
    pub n_query: usize,
    /// Family-tag mixing proportions. Empty = uniform over tasks.
    pub task_mix: Vec<(FamilyTag, f64)>,
    /// 0 = only the final checkpoint.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale defaults.
    pub fn full_scale() -> Self {
        TrainConfig {
            total_steps: 50_000,
            warmup_steps: 5_000,
            peak_lr: 6e-5,
            min_lr_fraction: 1e-5,
            batch_size: 4,
            weight_decay: 5e-3,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_support_choices: vec![0, 16, 128],
            n_query: 16,
            task_mix: Vec::new(),
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::InvalidConfig("warmup_steps must be < total_steps".into()));
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("min_lr_fraction", self.min_lr_fraction),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(TrainError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if self.batch_size == 0 || self.n_query == 0 {
            return Err(TrainError::InvalidConfig("batch_size and n_query must be >= 1".into()));
        }
        if self.n_support_choices.is_empty() {
            return Err(TrainError::InvalidConfig("n_support_choices must be nonempty".into()));
        }
        Ok(())
    }
}

/// Linear warmup 0 -> peak over `warmup_steps`, then cosine decay to
/// peak * min_lr_fraction at `total_steps`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> Result<f64, TrainError> {
    if step > config.total_steps {
        return Err(TrainError::OutOfRange { step, total: config.total_steps });
    }
    let peak = config.peak_lr;
    if step < config.warmup_steps {
        return Ok(peak * step as f64 / config.warmup_steps as f64);
    }
    let floor = peak * config.min_lr_fraction;
    let span = (config.total_steps - config.warmup_steps) as f64;
    let progress = (step - config.warmup_steps) as f64 / span;
    Ok(floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut HashMap<String, Tensor>, max_norm: f64) -> f64 {
    // sum in name order so the norm is reproducible across runs
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let norm = names.iter().map(|n| grads[*n].sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Adam first/second moments keyed by parameter name, with decoupled weight
/// decay applied to non-bias tensors.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: HashMap<String, Tensor>,
    pub v: HashMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. Parameters without a gradient entry (frozen tensors) are
    /// untouched, including by weight decay.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &HashMap<String, Tensor>,
        lr: f64,
        config: &TrainConfig,
    ) {
        self.t += 1;
        let t = self.t as i32;
        let b1 = config.adam_beta1;
        let b2 = config.adam_beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        params.for_each_mut(&mut |name, is_bias, p| {
            let Some(g) = grads.get(name) else { return };
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.rows, p.cols));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                let mut upd = mhat / (vhat.sqrt() + config.adam_eps);
                if !is_bias {
                    upd += config.weight_decay * p.data[i];
                }
                p.data[i] -= lr * upd;
            }
        });
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-compatibly, or to evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    /// Per-context gradient computations so far.
    pub grad_steps: u64,
    pub rng_word_pos: u128,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn fresh(
        model_config: ModelConfig,
        train_config: TrainConfig,
        loss_config: LossConfig,
        params: ModelParams,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: 0,
            grad_steps: 0,
            rng_word_pos: 0,
            model_config,
            train_config,
            loss_config,
            params,
            adam: AdamState::new(),
        }
    }

    /// Write `<stem>.manifest` (text: header, config lines, tensor index) and
    /// `<stem>.bin` (raw little-endian f64, in manifest order). f64 keeps
    /// resume bit-compatible.
    pub fn save(&self, stem: &Path) -> Result<(), TrainError> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        self.params.for_each(&mut |n, _, t| tensors.push((format!("param/{n}"), t.clone())));
        let mut adam_names: Vec<&String> = self.adam.m.keys().collect();
        adam_names.sort();
        for n in adam_names {
            tensors.push((format!("adam_m/{n}"), self.adam.m[n].clone()));
            tensors.push((format!("adam_v/{n}"), self.adam.v[n].clone()));
        }
        let mut manifest = BufWriter::new(std::fs::File::create(stem.with_extension("manifest"))?);
        writeln!(manifest, "metalic-checkpoint {CHECKPOINT_VERSION}")?;
        writeln!(manifest, "step\t{}", self.step)?;
        writeln!(manifest, "grad_steps\t{}", self.grad_steps)?;
        writeln!(manifest, "adam_t\t{}", self.adam.t)?;
        writeln!(manifest, "rng_word_pos\t{}", self.rng_word_pos)?;
        writeln!(manifest, "model_config\t{}", serde_json::to_string(&self.model_config).unwrap())?;
        writeln!(manifest, "train_config\t{}", serde_json::to_string(&self.train_config).unwrap())?;
        writeln!(manifest, "loss_config\t{}", serde_json::to_string(&self.loss_config).unwrap())?;
        let mut payload = BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
        let mut offset: u64 = 0;
        for (name, t) in &tensors {
            writeln!(manifest, "tensor\t{name}\t{}\t{}\tf64\t{offset}", t.rows, t.cols)?;
            for v in &t.data {
                payload.write_all(&v.to_le_bytes())?;
            }
            offset += (t.data.len() * 8) as u64;
        }
        manifest.flush()?;
        payload.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, TrainError> {
        let mpath = stem.with_extension("manifest");
        let bad = |message: String| TrainError::BadCheckpoint { path: mpath.clone(), message };
        let reader = BufReader::new(std::fs::File::open(&mpath)?);
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))??;
        if header != format!("metalic-checkpoint {CHECKPOINT_VERSION}") {
            return Err(bad(format!("unsupported header {header:?}")));
        }
        let mut step = None;
        let mut grad_steps = None;
        let mut adam_t = None;
        let mut rng_word_pos = None;
        let mut model_config: Option<ModelConfig> = None;
        let mut train_config: Option<TrainConfig> = None;
        let mut loss_config: Option<LossConfig> = None;
        let mut index: Vec<(String, usize, usize, u64)> = Vec::new();
        for line in lines {
            let line = line?;
            let mut parts = line.splitn(2, '\t');
            let key = parts.next().unwrap_or_default();
            let rest = parts.next().ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            match key {
                "step" => step = Some(rest.parse().map_err(|e| bad(format!("step: {e}")))?),
                "grad_steps" => {
                    grad_steps = Some(rest.parse().map_err(|e| bad(format!("grad_steps: {e}")))?)
                }
                "adam_t" => adam_t = Some(rest.parse().map_err(|e| bad(format!("adam_t: {e}")))?),
                "rng_word_pos" => {
                    rng_word_pos =
                        Some(rest.parse().map_err(|e| bad(format!("rng_word_pos: {e}")))?)
                }
                "model_config" => {
                    model_config =
                        Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?)
                }
                "train_config" => {
                    train_config =
                        Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?)
                }
                "loss_config" => {
                    loss_config = Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?)
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split('\t').collect();
                    if f.len() != 5 || f[3] != "f64" {
                        return Err(bad(format!("bad tensor line {rest:?}")));
                    }
                    index.push((
                        f[0].to_string(),
                        f[1].parse().map_err(|e| bad(format!("rows: {e}")))?,
                        f[2].parse().map_err(|e| bad(format!("cols: {e}")))?,
                        f[4].parse().map_err(|e| bad(format!("offset: {e}")))?,
                    ));
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        let model_config = model_config.ok_or_else(|| bad("missing model_config".into()))?;
        let train_config = train_config.ok_or_else(|| bad("missing train_config".into()))?;
        let loss_config = loss_config.ok_or_else(|| bad("missing loss_config".into()))?;

        let mut payload = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut payload)?;
        let mut table: HashMap<String, Tensor> = HashMap::new();
        for (name, rows, cols, offset) in index {
            let n = rows * cols;
            let start = offset as usize;
            let end = start + n * 8;
            if end > payload.len() {
                return Err(bad(format!("tensor {name} overruns payload")));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(name, Tensor::from_vec(rows, cols, data));
        }

        // Rebuild ModelParams by shape: initialize a skeleton and overwrite.
        let d_in = table
            .get("param/input.w")
            .ok_or_else(|| bad("missing param/input.w".into()))?
            .rows;
        let vocab = table.get("param/token_table").map(|t| t.rows);
        let mut skeleton_rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = init_model(&model_config, d_in, vocab, &mut skeleton_rng)?;
        let mut missing = Vec::new();
        params.for_each_mut(&mut |name, _, t| {
            match table.get(&format!("param/{name}")) {
                Some(src) if src.rows == t.rows && src.cols == t.cols => *t = src.clone(),
                _ => missing.push(name.to_string()),
            }
        });
        if !missing.is_empty() {
            return Err(bad(format!("missing or misshapen tensors: {missing:?}")));
        }
        let mut adam = AdamState::new();
        adam.t = adam_t.ok_or_else(|| bad("missing adam_t".into()))?;
        for (name, t) in &table {
            if let Some(p) = name.strip_prefix("adam_m/") {
                adam.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = name.strip_prefix("adam_v/") {
                adam.v.insert(p.to_string(), t.clone());
            }
        }
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            step: step.ok_or_else(|| bad("missing step".into()))?,
            grad_steps: grad_steps.ok_or_else(|| bad("missing grad_steps".into()))?,
            rng_word_pos: rng_word_pos.ok_or_else(|| bad("missing rng_word_pos".into()))?,
            model_config,
            train_config,
            loss_config,
            params,
            adam,
        })
    }
}

fn pick_task<'a>(
    tasks: &'a [FitnessTask],
    mix: &[(FamilyTag, f64)],
    rng: &mut ChaCha8Rng,
) -> &'a FitnessTask {
    if mix.is_empty() {
        return tasks.choose(rng).expect("nonempty tasks");
    }
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut draw = rng.gen::<f64>() * total;
    for (tag, w) in mix {
        draw -= w;
        if draw <= 0.0 {
            let pool: Vec<&FitnessTask> =
                tasks.iter().filter(|t| t.family_tag == *tag).collect();
            if let Some(t) = pool.choose(rng) {
                return t;
            }
            break; // tag has no tasks; fall through to uniform
        }
    }
    tasks.choose(rng).expect("nonempty tasks")
}

/// Sample one training context, retrying when the per-context query labels
/// admit no comparable pairs.
fn sample_train_context(
    task: &FitnessTask,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ContextBatch, TrainError> {
    const ATTEMPTS: usize = 20;
    for _ in 0..ATTEMPTS {
        let choice = *config.n_support_choices.as_slice().choose(rng).unwrap();
        let n_support = choice.min(task.len().saturating_sub(config.n_query));
        let ctx = sample_context(task, n_support, config.n_query, rng)?;
        let distinct = ctx
            .query_labels
            .iter()
            .any(|&a| ctx.query_labels.iter().any(|&b| a != b));
        if distinct || ctx.query_labels.len() < 2 {
            return Ok(ctx);
        }
    }
    Err(TrainError::ContextSampling { task: task.name.clone(), attempts: ATTEMPTS })
}

/// Fresh parameter init for a provider: resolves D_in and (for the learned
/// table) the vocabulary size from the provider itself.
pub fn init_checkpoint_params(
    model_config: &ModelConfig,
    provider: &Provider,
    seed: u64,
) -> Result<(ModelParams, TrainConfig), TrainError> {
    let mut rng = substream(seed, "init");
    let (d_in, vocab) = match provider {
        Provider::LearnedTable { d_in, alphabet, .. } => (*d_in, Some(alphabet.size())),
        p => (p.d_in(), None),
    };
    let params = init_model(model_config, d_in, vocab, &mut rng)?;
    let train_config = TrainConfig { seed, ..TrainConfig::full_scale() };
    Ok((params, train_config))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// (step, batch loss, pre-clip gradient norm, lr) per step.
    pub history: Vec<(usize, f64, f64, f64)>,
}

/// Run (or resume) the meta-training loop.
pub fn meta_train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    loss_config: &LossConfig,
    train_tasks: &[FitnessTask],
    provider: &Provider,
    resume: Option<Checkpoint>,
    checkpoint_stem: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model_config.validate()?;
    if train_tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut ckpt = match resume {
        Some(c) => c,
        None => {
            let (params, _) = init_checkpoint_params(model_config, provider, config.seed)?;
            Checkpoint::fresh(model_config.clone(), config.clone(), loss_config.clone(), params)
        }
    };
    let frozen_token_table = matches!(provider, Provider::LearnedTable { frozen: true, .. });
    let mut rng = substream(config.seed, "train");
    rng.set_word_pos(ckpt.rng_word_pos);
    let mut history = Vec::new();

    while ckpt.step < config.total_steps {
        let step = ckpt.step;
        let lr = lr_schedule(step, config)?;
        let mut contexts = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let task = pick_task(train_tasks, &config.task_mix, &mut rng);
            contexts.push(sample_train_context(task, config, &mut rng)?);
        }
        let result = meta_objective(
            &ckpt.params,
            model_config,
            provider,
            loss_config,
            &contexts,
            Some(&mut rng),
        );
        let (loss, mut grads) = match result {
            Ok(ok) => ok,
            Err(ObjectiveError::Model(crate::model::ModelError::NonFiniteActivation)) => {
                let diagnostic = checkpoint_stem.map(|s| diag_stem(s));
                if let Some(d) = &diagnostic {
                    ckpt.save(d)?;
                }
                return Err(TrainError::NonFiniteLoss { step, diagnostic });
            }
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() {
            let diagnostic = checkpoint_stem.map(|s| diag_stem(s));
            if let Some(d) = &diagnostic {
                ckpt.save(d)?;
            }
            return Err(TrainError::NonFiniteLoss { step, diagnostic });
        }
        ckpt.grad_steps += 1;
        if frozen_token_table {
            grads.remove("token_table");
        }
        let pre_norm = clip_global_norm(&mut grads, config.grad_clip_norm);
        ckpt.adam.apply(&mut ckpt.params, &grads, lr, config);
        ckpt.step += 1;
        ckpt.rng_word_pos = rng.get_word_pos();
        history.push((step, loss, pre_norm, lr));
        if let Some(stem) = checkpoint_stem {
            let periodic = config.checkpoint_every > 0 && ckpt.step % config.checkpoint_every == 0;
            if periodic || ckpt.step == config.total_steps {
                ckpt.save(stem)?;
            }
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, history })
}

fn diag_stem(stem: &Path) -> PathBuf {
    let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}-nonfinite"))
}
