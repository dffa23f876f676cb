use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use metalic::config::ExperimentConfig;
use metalic::data::{load_task_csv, write_task_csv};
use metalic::embed::{Provider, ProviderKind};
use metalic::eval::{
    aggregate, build_ablation, evaluate_task, EvalLeaf, EvalReport, ModelScorer,
};
use metalic::landscapes::family_task;
use metalic::model::predict_with_attention;
use metalic::rng::substream;
use metalic::tasks::{sample_context, Alphabet, FitnessTask};
use metalic::train::{init_checkpoint_params, meta_train, Checkpoint};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "metalic", about = "In-context meta-learning for sequence-fitness ranking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic task CSVs plus a train/holdout split manifest.
    GenTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Meta-train a model and write the checkpoint.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation name (no-icl, no-ft, no-pref, no-meta-train, no-aug,
        /// aux-channel).
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Fine-tune on each holdout task's support and write an EvalReport.
    FinetuneEval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint stem (path without .manifest/.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated shot list overriding the config.
        #[arg(long)]
        shots: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ablation: Option<String>,
        /// Worker threads for task-parallel evaluation (results are
        /// seed-deterministic regardless).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Tabulate mean +- std and gradient counters from EvalReport files.
    Compare {
        #[arg(long)]
        out: PathBuf,
        /// EvalReport JSON paths.
        reports: Vec<PathBuf>,
    },
    /// Dump per-layer column-attention over context rows as a text matrix.
    AttnDump {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task name from the generated registry.
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 8)]
        shot: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenTasks { config, out, force, seed } => gen_tasks(&config, &out, force, seed),
        Cmd::MetaTrain { config, out, seed, ablation } => {
            cmd_meta_train(&config, &out, seed, ablation.as_deref())
        }
        Cmd::FinetuneEval { config, checkpoint, out, shots, seed, ablation, workers } => {
            finetune_eval(
                &config,
                &checkpoint,
                &out,
                shots.as_deref(),
                seed,
                ablation.as_deref(),
                workers.max(1),
            )
        }
        Cmd::Compare { out, reports } => compare(&out, &reports),
        Cmd::AttnDump { config, checkpoint, task, shot, out, seed } => {
            attn_dump(&config, &checkpoint, &task, shot, &out, seed)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.landscape.rng_seed = s;
        cfg.train.seed = s;
        cfg.finetune.seed = s;
        cfg.eval.seeds = vec![s];
    }
    // embedding tables may live in a shared cache directory
    if cfg.provider.kind == ProviderKind::FileBacked {
        if let (Some(p), Ok(cache)) = (&cfg.provider.path, std::env::var("METALIC_LAB_CACHE")) {
            if p.is_relative() {
                cfg.provider.path = Some(PathBuf::from(cache).join(p));
            }
        }
    }
    Ok(cfg)
}

/// Create the output directory and echo the resolved config into it.
fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.cfg"), cfg.to_flat_string())?;
    Ok(())
}

fn alphabet_of(cfg: &ExperimentConfig) -> Arc<Alphabet> {
    Arc::new(Alphabet::synthetic(cfg.landscape.alphabet_size))
}

/// All tasks in index order; the last n_test are the holdouts.
fn generate_tasks(cfg: &ExperimentConfig) -> Result<(Vec<FitnessTask>, Vec<FitnessTask>)> {
    let total = cfg.tasks.n_train + cfg.tasks.n_test;
    let mut tasks = Vec::with_capacity(total);
    for i in 0..total {
        tasks.push(family_task(
            &cfg.landscape,
            i,
            cfg.tasks.records,
            cfg.tasks.max_mutations,
        )?);
    }
    let test = tasks.split_off(cfg.tasks.n_train);
    Ok((tasks, test))
}

/// Task sets for training/eval: from tasks.dir (CSVs + split manifest) when
/// configured, otherwise generated in memory.
fn load_tasks(cfg: &ExperimentConfig) -> Result<(Vec<FitnessTask>, Vec<FitnessTask>)> {
    let Some(dir) = &cfg.tasks.dir else {
        return generate_tasks(cfg);
    };
    let alphabet = alphabet_of(cfg);
    let manifest = std::fs::read_to_string(dir.join("split.manifest"))
        .with_context(|| format!("reading split manifest in {}", dir.display()))?;
    let holdouts: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "csv"))
        .collect();
    paths.sort();
    for p in paths {
        let task = load_task_csv(&p, &alphabet, cfg.model.max_len)?;
        if holdouts.contains(&task.name.as_str()) {
            test.push(task);
        } else {
            train.push(task);
        }
    }
    Ok((train, test))
}

fn make_provider(cfg: &ExperimentConfig) -> Result<Provider> {
    Ok(Provider::from_config(&cfg.provider, alphabet_of(cfg))?)
}

fn gen_tasks(config: &Path, out: &Path, force: bool, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        bail!("output directory {} is not empty (use --force to overwrite)", out.display());
    }
    prepare_out(&cfg, out)?;
    let (train, test) = generate_tasks(&cfg)?;
    for task in train.iter().chain(test.iter()) {
        write_task_csv(task, &out.join(format!("{}.csv", task.name)))?;
    }
    let mut manifest = std::fs::File::create(out.join("split.manifest"))?;
    for t in &test {
        writeln!(manifest, "{}", t.name)?;
    }
    println!(
        "wrote {} train + {} test task CSVs and split.manifest to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn apply_ablation(cfg: &mut ExperimentConfig, name: Option<&str>) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut ablations = cfg.ablations.clone();
    if let Some(n) = name {
        ablations.push(n.parse()?);
    }
    let mut finetune = Some(cfg.finetune.clone());
    for a in &ablations {
        names.push(a.to_string());
        let deltas = build_ablation(*a);
        deltas.apply(&mut cfg.model, &mut cfg.train, &mut finetune);
        if deltas.fresh_init {
            cfg.train.total_steps = 0; // evaluate the initialization as-is
        }
        if deltas.single_family_mix && cfg.landscape.kind == metalic::landscapes::LandscapeKind::Nk
        {
            // NoAug: restrict generation to single mutants only
            cfg.tasks.max_mutations = 1;
        }
        if deltas.disable_finetune {
            cfg.finetune.steps = 0;
        }
    }
    Ok(names)
}

fn cmd_meta_train(config: &Path, out: &Path, seed: Option<u64>, ablation: Option<&str>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    apply_ablation(&mut cfg, ablation)?;
    prepare_out(&cfg, out)?;
    let (train_tasks, _) = load_tasks(&cfg)?;
    let provider = make_provider(&cfg)?;
    let stem = out.join("checkpoint");
    if cfg.train.total_steps == 0 {
        // fresh-init path (NoMetaTrain): save the initialization directly
        let (params, train_config) =
            init_checkpoint_params(&cfg.model, &provider, cfg.train.seed)?;
        let ckpt = Checkpoint::fresh(
            cfg.model.clone(),
            train_config,
            Default::default(),
            params,
        );
        ckpt.save(&stem)?;
        println!("wrote untrained checkpoint {}", stem.display());
        return Ok(());
    }
    let outcome = meta_train(
        &cfg.train,
        &cfg.model,
        &Default::default(),
        &train_tasks,
        &provider,
        None,
        Some(&stem),
    )?;
    let mut history = std::fs::File::create(out.join("history.csv"))?;
    writeln!(history, "step,loss,grad_norm,lr")?;
    for (step, loss, norm, lr) in &outcome.history {
        writeln!(history, "{step},{loss},{norm},{lr}")?;
    }
    let last = outcome.history.last().unwrap();
    println!(
        "trained {} steps ({} gradient computations), final batch loss {:.4}; checkpoint {}",
        outcome.checkpoint.step,
        outcome.checkpoint.grad_steps,
        last.1,
        stem.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune_eval(
    config: &Path,
    checkpoint: &Path,
    out: &Path,
    shots: Option<&str>,
    seed: Option<u64>,
    ablation: Option<&str>,
    workers: usize,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    let ablation_names = apply_ablation(&mut cfg, ablation)?;
    let merge_early_stop = ablation_names.iter().any(|a| a == "no-ft");
    if let Some(s) = shots {
        cfg.eval.shots = s
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .context("parsing --shots")?;
    }
    prepare_out(&cfg, out)?;
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (_, holdouts) = load_tasks(&cfg)?;
    if holdouts.is_empty() {
        bail!("no holdout tasks to evaluate");
    }
    let provider = make_provider(&cfg)?;
    let finetune_cfg = (cfg.finetune.steps > 0).then(|| cfg.finetune.clone());

    let mut jobs: Vec<(usize, u64, &FitnessTask)> = Vec::new();
    for &shot in &cfg.eval.shots {
        for &s in &cfg.eval.seeds {
            for t in &holdouts {
                jobs.push((shot, s, t));
            }
        }
    }
    let leaves = std::sync::Mutex::new(Vec::<EvalLeaf>::new());
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..workers.min(jobs.len()).max(1) {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some(&(shot, eval_seed, task)) = jobs.get(i) else { return Ok(()) };
                    let ft = if shot == 0 { None } else { finetune_cfg.clone() };
                    let mut scorer = ModelScorer::new(&ckpt, &provider, ft);
                    let results = evaluate_task(
                        &mut scorer,
                        task,
                        shot,
                        &cfg.eval,
                        eval_seed,
                        merge_early_stop,
                    )?;
                    let mut guard = leaves.lock().unwrap();
                    for (resample, r) in results.iter().enumerate() {
                        guard.push(EvalLeaf {
                            task: task.name.clone(),
                            shot,
                            seed: eval_seed,
                            resample,
                            rho: r.rho,
                            degenerate: r.degenerate,
                            scored: r.scored,
                            dropped: r.dropped,
                        });
                    }
                }
            }));
        }
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    let mut leaves = leaves.into_inner().unwrap();
    leaves.sort_by(|a, b| {
        (&a.task, a.shot, a.seed, a.resample).cmp(&(&b.task, b.shot, b.seed, b.resample))
    });
    let aggregates = aggregate(&leaves);
    let report = EvalReport {
        checkpoint_id: format!(
            "{}@step{}",
            checkpoint.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            ckpt.step
        ),
        ablations: ablation_names,
        grad_steps: ckpt.grad_steps,
        leaves,
        aggregates,
        config_echo: serde_json::to_value(&cfg)?,
    };
    let path = out.join("eval_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    for a in &report.aggregates {
        println!("shot {:>4}: mean rho {:+.4} +- {:.4}", a.shot, a.mean, a.std);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(out: &Path, reports: &[PathBuf]) -> Result<()> {
    if reports.is_empty() {
        bail!("no report files given");
    }
    let mut loaded = Vec::new();
    for p in reports {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading report {}", p.display()))?;
        let r: EvalReport = serde_json::from_str(&text)?;
        loaded.push(r);
    }
    let mut shots: Vec<usize> = loaded
        .iter()
        .flat_map(|r| r.aggregates.iter().map(|a| a.shot))
        .collect();
    shots.sort_unstable();
    shots.dedup();
    let mut table = String::new();
    table.push_str(&format!("{:<40} {:>12}", "method", "grad comps"));
    for s in &shots {
        table.push_str(&format!(" {:>18}", format!("shot {s}")));
    }
    table.push('\n');
    for r in &loaded {
        let mut id = r.checkpoint_id.clone();
        if !r.ablations.is_empty() {
            id = format!("{id} [{}]", r.ablations.join(","));
        }
        table.push_str(&format!("{:<40} {:>12}", id, r.grad_steps));
        for s in &shots {
            match r.aggregates.iter().find(|a| a.shot == *s) {
                Some(a) => {
                    table.push_str(&format!(" {:>18}", format!("{:+.3} +- {:.3}", a.mean, a.std)))
                }
                None => table.push_str(&format!(" {:>18}", "-")),
            }
        }
        table.push('\n');
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, &table)?;
    print!("{table}");
    Ok(())
}

fn attn_dump(
    config: &Path,
    checkpoint: &Path,
    task_name: &str,
    shot: usize,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (train, test) = load_tasks(&cfg)?;
    let task = train
        .iter()
        .chain(test.iter())
        .find(|t| t.name == task_name)
        .with_context(|| format!("task {task_name:?} not found"))?;
    let provider = make_provider(&cfg)?;
    let mut rng = substream(cfg.eval.seeds.first().copied().unwrap_or(0), "attn-dump");
    let n_query = 8.min(task.len().saturating_sub(shot)).max(1);
    let ctx = sample_context(task, shot.min(task.len() - n_query), n_query, &mut rng)?;
    let (_, map) = predict_with_attention(&ckpt.params, &ckpt.model_config, &provider, &ctx)?;
    let map = map.context("column attention disabled in this checkpoint; nothing to dump")?;
    let layers = map.layers.len();
    let k = map.layers[0][0].rows;
    let mut text = format!("{layers} {k}\n");
    for layer in &map.layers {
        // average over heads, then renormalize each row
        let mut m = metalic::tensor::Tensor::zeros(k, k);
        for h in layer {
            m.add_assign(h);
        }
        m.scale_assign(1.0 / layer.len() as f64);
        for r in 0..k {
            let row = m.row(r);
            let sum: f64 = row.iter().sum();
            let line: Vec<String> = row.iter().map(|v| format!("{:.6}", v / sum)).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, text)?;
    println!("wrote attention dump ({layers} layers, {k} context rows) to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
