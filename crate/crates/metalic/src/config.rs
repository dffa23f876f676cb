//! Flat key-per-line experiment configs. One `key = value` pair per line,
//! `#` comments, `include <path>` (relative to the including file), dotted
//! keys per section. Unknown keys are errors so typos cannot silently fall
//! back to defaults.

use crate::adapt::FinetuneConfig;
use crate::embed::{ProviderConfig, ProviderKind};
use crate::eval::{Ablation, EvalProtocol};
use crate::landscapes::{LandscapeKind, LandscapeSpec};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {message}")]
    Parse { file: PathBuf, line: usize, message: String },
    #[error("{file}:{line}: unknown key {key:?}")]
    UnknownKey { file: PathBuf, line: usize, key: String },
    #[error("include depth limit exceeded at {0}")]
    IncludeDepth(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How many synthetic tasks to generate and how big each is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub records: usize,
    pub max_mutations: usize,
    /// Directory of task CSVs plus split manifest (written by gen-tasks,
    /// read by the other commands).
    pub dir: Option<PathBuf>,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig { n_train: 200, n_test: 20, records: 400, max_mutations: 2, dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub landscape: LandscapeSpec,
    pub tasks: TaskGenConfig,
    pub provider: ProviderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalProtocol,
    pub ablations: Vec<Ablation>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            landscape: LandscapeSpec {
                n_sites: 10,
                alphabet_size: 6,
                kind: LandscapeKind::Nk,
                k_neighbors: 2,
                noise_std: 0.05,
                task_jitter: 0.15,
                rng_seed: 0,
            },
            tasks: TaskGenConfig::default(),
            provider: ProviderConfig::learned(16),
            model: ModelConfig::desk_scale(),
            train: TrainConfig::full_scale(),
            finetune: FinetuneConfig::default(),
            eval: EvalProtocol::default(),
            ablations: Vec::new(),
            out_dir: None,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("bad list element {s:?}: {e}")))
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        config.apply_file(path, 0)?;
        Ok(config)
    }

    fn apply_file(&mut self, path: &Path, depth: usize) -> Result<(), ConfigError> {
        if depth > 8 {
            return Err(ConfigError::IncludeDepth(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(inc) = line.strip_prefix("include ") {
                let target = path.parent().unwrap_or(Path::new(".")).join(inc.trim());
                self.apply_file(&target, depth + 1)?;
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                file: path.to_path_buf(),
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|message| match message {
                SetError::Unknown => ConfigError::UnknownKey {
                    file: path.to_path_buf(),
                    line: line_no,
                    key: key.trim().to_string(),
                },
                SetError::Bad(message) => ConfigError::Parse {
                    file: path.to_path_buf(),
                    line: line_no,
                    message,
                },
            })?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        fn p<T: std::str::FromStr>(v: &str) -> Result<T, SetError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| SetError::Bad(format!("bad value {v:?}: {e}")))
        }
        match key {
            "landscape.n_sites" => self.landscape.n_sites = p(v)?,
            "landscape.alphabet_size" => self.landscape.alphabet_size = p(v)?,
            "landscape.kind" => {
                self.landscape.kind = match v {
                    "additive" => LandscapeKind::Additive,
                    "nk" => LandscapeKind::Nk,
                    "epistatic" => LandscapeKind::Epistatic,
                    "mutscan" => LandscapeKind::Mutscan,
                    _ => return Err(SetError::Bad(format!("unknown landscape kind {v:?}"))),
                }
            }
            "landscape.k_neighbors" => self.landscape.k_neighbors = p(v)?,
            "landscape.noise_std" => self.landscape.noise_std = p(v)?,
            "landscape.task_jitter" => self.landscape.task_jitter = p(v)?,
            "landscape.rng_seed" => self.landscape.rng_seed = p(v)?,
            "tasks.n_train" => self.tasks.n_train = p(v)?,
            "tasks.n_test" => self.tasks.n_test = p(v)?,
            "tasks.records" => self.tasks.records = p(v)?,
            "tasks.max_mutations" => self.tasks.max_mutations = p(v)?,
            "tasks.dir" => self.tasks.dir = Some(PathBuf::from(v)),
            "provider.kind" => {
                self.provider.kind = match v {
                    "onehot" => ProviderKind::Onehot,
                    "learned_table" => ProviderKind::LearnedTable,
                    "file_backed" => ProviderKind::FileBacked,
                    _ => return Err(SetError::Bad(format!("unknown provider kind {v:?}"))),
                }
            }
            "provider.d_in" => self.provider.d_in = p(v)?,
            "provider.path" => self.provider.path = Some(PathBuf::from(v)),
            "provider.freeze_embeddings" => self.provider.freeze_embeddings = p(v)?,
            "model.embed_dim" => self.model.embed_dim = p(v)?,
            "model.n_layers" => self.model.n_layers = p(v)?,
            "model.n_heads" => self.model.n_heads = p(v)?,
            "model.axial_ffn_dim" => self.model.axial_ffn_dim = p(v)?,
            "model.mlp_layers" => self.model.mlp_layers = parse_list(v).map_err(SetError::Bad)?,
            "model.attention_dropout" => self.model.attention_dropout = p(v)?,
            "model.dropout" => self.model.dropout = p(v)?,
            "model.use_aux_channel" => self.model.use_aux_channel = p(v)?,
            "model.column_attention_enabled" => self.model.column_attention_enabled = p(v)?,
            "model.max_len" => self.model.max_len = p(v)?,
            "train.total_steps" => self.train.total_steps = p(v)?,
            "train.warmup_steps" => self.train.warmup_steps = p(v)?,
            "train.peak_lr" => self.train.peak_lr = p(v)?,
            "train.min_lr_fraction" => self.train.min_lr_fraction = p(v)?,
            "train.batch_size" => self.train.batch_size = p(v)?,
            "train.weight_decay" => self.train.weight_decay = p(v)?,
            "train.grad_clip_norm" => self.train.grad_clip_norm = p(v)?,
            "train.adam_beta1" => self.train.adam_beta1 = p(v)?,
            "train.adam_beta2" => self.train.adam_beta2 = p(v)?,
            "train.adam_eps" => self.train.adam_eps = p(v)?,
            "train.n_support_choices" => {
                self.train.n_support_choices = parse_list(v).map_err(SetError::Bad)?
            }
            "train.n_query" => self.train.n_query = p(v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = p(v)?,
            "train.seed" => self.train.seed = p(v)?,
            "finetune.steps" => self.finetune.steps = p(v)?,
            "finetune.lr" => self.finetune.lr = p(v)?,
            "finetune.skip_warmup" => self.finetune.skip_warmup = p(v)?,
            "finetune.warmup_steps" => self.finetune.warmup_steps = p(v)?,
            "finetune.subsample_query_size" => self.finetune.subsample_query_size = p(v)?,
            "finetune.subsample_support_size" => {
                self.finetune.subsample_support_size =
                    if v == "auto" { None } else { Some(p(v)?) }
            }
            "finetune.early_stop_set_size" => self.finetune.early_stop_set_size = p(v)?,
            "finetune.early_stop_eval_every" => self.finetune.early_stop_eval_every = p(v)?,
            "finetune.seed" => self.finetune.seed = p(v)?,
            "eval.shots" => self.eval.shots = parse_list(v).map_err(SetError::Bad)?,
            "eval.query_chunk" => self.eval.query_chunk = p(v)?,
            "eval.early_stop_size" => self.eval.early_stop_size = p(v)?,
            "eval.max_points" => self.eval.max_points = p(v)?,
            "eval.support_resamples" => self.eval.support_resamples = p(v)?,
            "eval.seeds" => self.eval.seeds = parse_list(v).map_err(SetError::Bad)?,
            "ablations" => {
                self.ablations = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<Ablation>().map_err(|e| SetError::Bad(e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Canonical flat rendering of every key (the config echo). Reloading
    /// the echo reproduces this config.
    pub fn to_flat_string(&self) -> String {
        let mut s = String::new();
        let kind = match self.landscape.kind {
            LandscapeKind::Additive => "additive",
            LandscapeKind::Nk => "nk",
            LandscapeKind::Epistatic => "epistatic",
            LandscapeKind::Mutscan => "mutscan",
        };
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        writeln!(s, "landscape.n_sites = {}", self.landscape.n_sites).unwrap();
        writeln!(s, "landscape.alphabet_size = {}", self.landscape.alphabet_size).unwrap();
        writeln!(s, "landscape.kind = {kind}").unwrap();
        writeln!(s, "landscape.k_neighbors = {}", self.landscape.k_neighbors).unwrap();
        writeln!(s, "landscape.noise_std = {}", self.landscape.noise_std).unwrap();
        writeln!(s, "landscape.task_jitter = {}", self.landscape.task_jitter).unwrap();
        writeln!(s, "landscape.rng_seed = {}", self.landscape.rng_seed).unwrap();
        writeln!(s, "tasks.n_train = {}", self.tasks.n_train).unwrap();
        writeln!(s, "tasks.n_test = {}", self.tasks.n_test).unwrap();
        writeln!(s, "tasks.records = {}", self.tasks.records).unwrap();
        writeln!(s, "tasks.max_mutations = {}", self.tasks.max_mutations).unwrap();
        if let Some(d) = &self.tasks.dir {
            writeln!(s, "tasks.dir = {}", d.display()).unwrap();
        }
        let pk = match self.provider.kind {
            ProviderKind::Onehot => "onehot",
            ProviderKind::LearnedTable => "learned_table",
            ProviderKind::FileBacked => "file_backed",
        };
        writeln!(s, "provider.kind = {pk}").unwrap();
        writeln!(s, "provider.d_in = {}", self.provider.d_in).unwrap();
        if let Some(pp) = &self.provider.path {
            writeln!(s, "provider.path = {}", pp.display()).unwrap();
        }
        writeln!(s, "provider.freeze_embeddings = {}", self.provider.freeze_embeddings).unwrap();
        writeln!(s, "model.embed_dim = {}", self.model.embed_dim).unwrap();
        writeln!(s, "model.n_layers = {}", self.model.n_layers).unwrap();
        writeln!(s, "model.n_heads = {}", self.model.n_heads).unwrap();
        writeln!(s, "model.axial_ffn_dim = {}", self.model.axial_ffn_dim).unwrap();
        writeln!(s, "model.mlp_layers = {}", join(&self.model.mlp_layers)).unwrap();
        writeln!(s, "model.attention_dropout = {}", self.model.attention_dropout).unwrap();
        writeln!(s, "model.dropout = {}", self.model.dropout).unwrap();
        writeln!(s, "model.use_aux_channel = {}", self.model.use_aux_channel).unwrap();
        writeln!(s, "model.column_attention_enabled = {}", self.model.column_attention_enabled)
            .unwrap();
        writeln!(s, "model.max_len = {}", self.model.max_len).unwrap();
        writeln!(s, "train.total_steps = {}", self.train.total_steps).unwrap();
        writeln!(s, "train.warmup_steps = {}", self.train.warmup_steps).unwrap();
        writeln!(s, "train.peak_lr = {}", self.train.peak_lr).unwrap();
        writeln!(s, "train.min_lr_fraction = {}", self.train.min_lr_fraction).unwrap();
        writeln!(s, "train.batch_size = {}", self.train.batch_size).unwrap();
        writeln!(s, "train.weight_decay = {}", self.train.weight_decay).unwrap();
        writeln!(s, "train.grad_clip_norm = {}", self.train.grad_clip_norm).unwrap();
        writeln!(s, "train.adam_beta1 = {}", self.train.adam_beta1).unwrap();
        writeln!(s, "train.adam_beta2 = {}", self.train.adam_beta2).unwrap();
        writeln!(s, "train.adam_eps = {}", self.train.adam_eps).unwrap();
        writeln!(s, "train.n_support_choices = {}", join(&self.train.n_support_choices)).unwrap();
        writeln!(s, "train.n_query = {}", self.train.n_query).unwrap();
        writeln!(s, "train.checkpoint_every = {}", self.train.checkpoint_every).unwrap();
        writeln!(s, "train.seed = {}", self.train.seed).unwrap();
        writeln!(s, "finetune.steps = {}", self.finetune.steps).unwrap();
        writeln!(s, "finetune.lr = {}", self.finetune.lr).unwrap();
        writeln!(s, "finetune.skip_warmup = {}", self.finetune.skip_warmup).unwrap();
        writeln!(s, "finetune.warmup_steps = {}", self.finetune.warmup_steps).unwrap();
        writeln!(s, "finetune.subsample_query_size = {}", self.finetune.subsample_query_size)
            .unwrap();
        match self.finetune.subsample_support_size {
            Some(x) => writeln!(s, "finetune.subsample_support_size = {x}").unwrap(),
            None => writeln!(s, "finetune.subsample_support_size = auto").unwrap(),
        }
        writeln!(s, "finetune.early_stop_set_size = {}", self.finetune.early_stop_set_size)
            .unwrap();
        writeln!(s, "finetune.early_stop_eval_every = {}", self.finetune.early_stop_eval_every)
            .unwrap();
        writeln!(s, "finetune.seed = {}", self.finetune.seed).unwrap();
        writeln!(s, "eval.shots = {}", join(&self.eval.shots)).unwrap();
        writeln!(s, "eval.query_chunk = {}", self.eval.query_chunk).unwrap();
        writeln!(s, "eval.early_stop_size = {}", self.eval.early_stop_size).unwrap();
        writeln!(s, "eval.max_points = {}", self.eval.max_points).unwrap();
        writeln!(s, "eval.support_resamples = {}", self.eval.support_resamples).unwrap();
        writeln!(
            s,
            "eval.seeds = {}",
            self.eval.seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        if !self.ablations.is_empty() {
            let a: Vec<String> = self.ablations.iter().map(|a| a.to_string()).collect();
            writeln!(s, "ablations = {}", a.join(",")).unwrap();
        }
        if let Some(d) = &self.out_dir {
            writeln!(s, "out_dir = {}", d.display()).unwrap();
        }
        s
    }
}

enum SetError {
    Unknown,
    Bad(String),
}
