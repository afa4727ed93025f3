use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hrdt_core::flow::SamplerConfig;
use hrdt_core::gym::{
    evaluate, evaluate_grouped, generate_dataset, overall_success, parse_task_list, Dataset,
    EvalConfig, Mode, ModelPolicy, EXEC_NOISE,
};
use hrdt_core::model::{
    check_model_gradients, param_count, prefix_of, HrdtModel, ModelConfig, PREFIXES,
};
use hrdt_core::train::{train, Checkpoint, MetricsRow, Stage, TrainConfig};

/// Flow-matching bimanual policy: data generation, training, evaluation.
#[derive(Parser)]
#[command(name = "hrdt", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the scripted expert and write a dataset directory.
    GenData {
        #[arg(long)]
        embodiment: String,
        #[arg(long, default_value = "easy")]
        mode: Mode,
        #[arg(long)]
        episodes: usize,
        /// `all`, family names or task ids, comma separated.
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Std-dev (m) of noise on executed end-effector targets; labels stay clean.
        #[arg(long, default_value_t = EXEC_NOISE)]
        exec_noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a fresh model on a dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Continue from a checkpoint (`--transfer` re-initialises the
    /// embodiment adapters); without `--init` trains from scratch.
    Finetune {
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        transfer: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Architecture for scratch runs (defaults to the desk config).
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Closed-loop success rates in the gym.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Euler steps per action chunk.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Actions executed per chunk before replanning (default: horizon / 2).
        #[arg(long)]
        replan_k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "easy")]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Evaluate on the task instantiations stored in this dataset
        /// (one trial each) instead of fresh seeds.
        #[arg(long)]
        on_data: Option<PathBuf>,
        /// Per-task JSONL; a CSV summary is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient path in f64.
    Gradcheck {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Failure threshold on the maximum relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Print a checkpoint's configuration and parameter census.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Overrides applied on top of the train config file.
#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Metrics JSONL (default: `<out>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

impl TrainOpts {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(steps, seed, lr, batch_size, accum, threads, eval_every);
        cfg
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_train_config(path: Option<&Path>, opts: &TrainOpts) -> Result<TrainConfig> {
    let base = match path {
        Some(p) => {
            TrainConfig::load(p).with_context(|| format!("reading train config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let cfg = opts.apply(base);
    cfg.validate()?;
    Ok(cfg)
}

fn run_training(
    stage: Stage,
    init: Option<&Checkpoint>,
    data_dir: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<()> {
    let data = Dataset::load(data_dir)
        .with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let metrics_path =
        metrics.map_or_else(|| with_suffix(out, ".metrics.jsonl"), Path::to_path_buf);
    let mut sink = BufWriter::new(File::create(&metrics_path)?);
    let every = (cfg.steps / 20).max(1);
    let mut on_row = |row: &MetricsRow| -> hrdt_core::Result<()> {
        writeln!(sink, "{}", serde_json::to_string(row)?)?;
        if row.step % every == 0 || row.step == 1 || row.eval.is_some() {
            eprintln!(
                "step {:>6}  loss {:.5}  grad_norm {:.4}  {:.1}s{}",
                row.step,
                row.loss,
                row.grad_norm,
                row.wall_ms as f64 / 1000.0,
                row.eval
                    .as_ref()
                    .and_then(|e| e.get("overall"))
                    .map_or(String::new(), |s| format!("  success {:.2}", s))
            );
        }
        Ok(())
    };
    let ckpt = train(stage, init, &data, model_cfg, cfg, &mut on_row)?;
    sink.flush()?;
    ckpt.save(out)?;
    eprintln!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    println!("checkpoint   {}", path.display());
    println!(
        "embodiment   {} ({}-d actions, {}-d state)",
        ck.embodiment.name, ck.embodiment.action_dim, ck.embodiment.state_dim
    );
    println!(
        "training     stage={} steps={} seed={} lr={} wd={} clip={}",
        ck.meta.stage,
        ck.meta.steps,
        ck.meta.seed,
        ck.meta.lr,
        ck.meta.weight_decay,
        ck.meta.clip_norm
    );
    println!("dataset      sha256:{}", ck.meta.dataset_hash);
    println!(
        "optimizer    {}",
        ck.opt
            .as_ref()
            .map_or("none".to_string(), |o| format!("adamw step {}", o.step))
    );
    println!("\n[model config]\n{}", ck.model_config.to_toml_string());
    println!("[prefix census]");
    for prefix in PREFIXES {
        let (tensors, scalars) = ck
            .params
            .iter()
            .filter(|p| prefix_of(&p.name) == Some(prefix))
            .fold((0usize, 0usize), |(t, s), p| (t + 1, s + p.tensor.numel()));
        println!("  {prefix:<16} {tensors:>4} tensors {scalars:>12} params");
    }
    let materialized = ck.params.numel() as u64;
    println!(
        "\nparam count  {materialized} (closed form {})",
        param_count(&ck.model_config)
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData {
            embodiment,
            mode,
            episodes,
            tasks,
            seed,
            exec_noise,
            out,
        } => {
            let tasks = parse_task_list(&tasks)?;
            let t0 = Instant::now();
            let m = generate_dataset(episodes, &embodiment, mode, &tasks, seed, exec_noise, &out)?;
            let steps: usize = m.episodes.iter().map(|e| e.length).sum();
            eprintln!(
                "wrote {} {} episodes ({} steps, {} tasks) to {} in {:.1}s",
                m.episodes.len(),
                embodiment,
                steps,
                tasks.len(),
                out.display(),
                t0.elapsed().as_secs_f64()
            );
        }
        Cmd::Pretrain {
            data,
            model_config,
            train_config,
            out,
            opts,
        } => {
            let mcfg = ModelConfig::load(&model_config)
                .with_context(|| format!("reading model config {}", model_config.display()))?;
            let cfg = load_train_config(train_config.as_deref(), &opts)?;
            run_training(
                Stage::Pretrain,
                None,
                &data,
                &mcfg,
                &cfg,
                &out,
                opts.metrics.as_deref(),
            )?;
        }
        Cmd::Finetune {
            init,
            transfer,
            data,
            out,
            model_config,
            train_config,
            opts,
        } => {
            let cfg = load_train_config(train_config.as_deref(), &opts)?;
            let ckpt = init.as_deref().map(Checkpoint::load).transpose()?;
            let stage = match (&ckpt, transfer) {
                (Some(_), t) => Stage::Finetune { transfer: t },
                (None, false) => Stage::Scratch,
                (None, true) => bail!("--transfer needs --init"),
            };
            let mcfg = match &model_config {
                Some(p) => ModelConfig::load(p)?,
                None => {
                    let spec = Dataset::load(&data)?.manifest.embodiment;
                    ModelConfig::desk().with_embodiment(spec.action_dim, spec.state_dim)
                }
            };
            run_training(
                stage,
                ckpt.as_ref(),
                &data,
                &mcfg,
                &cfg,
                &out,
                opts.metrics.as_deref(),
            )?;
        }
        Cmd::Eval {
            ckpt,
            tasks,
            trials,
            steps,
            replan_k,
            seed,
            mode,
            threads,
            on_data,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = HrdtModel::from_parts(ck.model_config.clone(), ck.params.clone())?;
            let policy = ModelPolicy {
                model: &model,
                spec: &ck.embodiment,
                sampler: SamplerConfig::with_steps(steps),
            };
            let tasks = parse_task_list(&tasks)?;
            let k = replan_k.unwrap_or((ck.model_config.horizon / 2).max(1));
            let cfg = EvalConfig {
                mode,
                threads,
                ..EvalConfig::new(trials, k, seed)
            };
            let results = match on_data {
                Some(dir) => {
                    let data = Dataset::load(&dir)?;
                    let inst: Vec<_> = data
                        .instances()
                        .into_iter()
                        .filter(|(t, _)| tasks.contains(t))
                        .collect();
                    let cfg = EvalConfig {
                        mode: data.manifest.mode,
                        ..cfg
                    };
                    evaluate_grouped(&policy, &inst, &cfg)?
                }
                None => evaluate(&policy, &tasks, &cfg)?,
            };
            println!(
                "{:<24} {:>6} {:>9} {:>10}",
                "task_id", "trials", "success", "mean_score"
            );
            for r in &results {
                println!(
                    "{:<24} {:>6} {:>9.3} {:>10.3}",
                    r.task_id, r.trials, r.success_rate, r.mean_score
                );
            }
            println!(
                "{:<24} {:>6} {:>9.3}",
                "overall",
                results.iter().map(|r| r.trials).sum::<usize>(),
                overall_success(&results)
            );
            if let Some(out) = out {
                let mut w = BufWriter::new(File::create(&out)?);
                for r in &results {
                    writeln!(w, "{}", serde_json::to_string(r)?)?;
                }
                w.flush()?;
                let mut csv = BufWriter::new(File::create(out.with_extension("csv"))?);
                writeln!(csv, "task_id,trials,success_rate,mean_score")?;
                for r in &results {
                    writeln!(
                        csv,
                        "{},{},{},{}",
                        r.task_id, r.trials, r.success_rate, r.mean_score
                    )?;
                }
                csv.flush()?;
            }
        }
        Cmd::Gradcheck {
            model_config,
            eps,
            samples,
            seed,
            tol,
        } => {
            let cfg = ModelConfig::load(&model_config)?;
            let t0 = Instant::now();
            let rep = check_model_gradients(&cfg, eps, samples, seed)?;
            let secs = t0.elapsed().as_secs_f64();
            println!("checked {} parameters (f64, eps {eps:e})", rep.checked);
            println!("max relative error {:.3e}", rep.max_rel_err);
            if let Some((name, idx)) = &rep.worst {
                println!(
                    "worst {name}[{idx}]: analytic {:.6e} numeric {:.6e}",
                    rep.worst_analytic, rep.worst_numeric
                );
            }
            println!("elapsed {secs:.2}s");
            if rep.max_rel_err >= tol {
                bail!("gradient check failed: {:.3e} >= {tol:e}", rep.max_rel_err);
            }
            println!("ok");
        }
        Cmd::Inspect { ckpt } => inspect(&ckpt)?,
    }
    Ok(())
}
