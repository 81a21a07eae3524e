use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chansel::checkpoint::Checkpoint;
use chansel::cifar::Split;
use chansel::config::RunConfig;
use chansel::data::load_images;
use chansel::eval::{self, AnalysisSummary};
use chansel::fit::{self, to_json, write_file, RESOLVED_FILE};
use chansel::Error;
use clap::{Args, Parser, Subcommand};

/// Budgeted dynamic channel selection: training, sparse inference and analysis.
#[derive(Parser)]
#[command(name = "chansel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Run config (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set budget.t_d=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// CIFAR root: the batch directory or its parent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Model checkpoint (for `train`: resume from it).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (a `.json` path is taken as the report file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; ignored by commands that draw no random numbers.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for evaluation batches; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Split to evaluate: `val` (the test batch) or `train`.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated encoder; writes metrics, checkpoints and summary.json.
    Train(Common),
    /// 1-NN accuracy of a checkpoint plus its measured FLOP ratio.
    EvalKnn(Common),
    /// Per-channel activation frequencies and categories.
    AnalyzeGates(Common),
    /// Dense and dynamic MAC counts per gated block.
    CountFlops {
        #[command(flatten)]
        common: Common,
        /// Count with every channel on instead of measuring a split.
        #[arg(long)]
        dense: bool,
    },
    /// Sparse inference over a split; writes per-block execution stats.
    Infer(Common),
}

fn resolve(c: &Common, ckpt: Option<&Checkpoint>) -> Result<RunConfig, Error> {
    let mut cfg = match (&c.config, ckpt) {
        (Some(p), _) => RunConfig::load(Some(p), &[])?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => RunConfig::default(),
    };
    for o in &c.set {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::config("--set", format!("expected key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    cfg.validate()?;
    if let Some(ck) = ckpt {
        ck.check_compatible(&cfg)?;
    }
    Ok(cfg)
}

fn split_of(c: &Common) -> Result<Split, Error> {
    Split::parse(&c.split).ok_or_else(|| Error::config("--split", format!("expected val or train, got {:?}", c.split)))
}

fn load_checkpoint(c: &Common) -> Result<Option<Checkpoint>, Error> {
    c.checkpoint.as_deref().map(Checkpoint::load).transpose()
}

fn require_checkpoint(c: &Common) -> Result<Checkpoint, Error> {
    load_checkpoint(c)?.ok_or_else(|| Error::config("--checkpoint", "this command needs a checkpoint"))
}

/// Report file and echo directory for `--out`.
fn out_paths(out: &Path, default_name: &str) -> (PathBuf, PathBuf) {
    if out.extension().is_some_and(|e| e == "json") {
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
        (out.to_path_buf(), dir)
    } else {
        (out.join(default_name), out.to_path_buf())
    }
}

fn echo(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    write_file(&dir.join(RESOLVED_FILE), cfg.render().as_bytes())
}

fn train(c: &Common) -> Result<()> {
    let resume = load_checkpoint(c)?;
    let cfg = resolve(c, resume.as_ref())?;
    let out = c.out.clone().ok_or_else(|| Error::config("--out", "train needs an output directory"))?;
    let train = load_images(&cfg, Split::Train)?;
    let val = load_images(&cfg, Split::Test)?;
    eprintln!("train: {} images, val: {} images, t_d={}", train.len(), val.len(), cfg.train.budget.target);
    let s = fit::fit(&cfg, &train, &val, &out, resume, &mut |line| eprintln!("{line}"))?;
    println!(
        "knn@{}={:.4} flop_ratio={:.4} loss_ssl={:.4} out={}",
        s.k,
        s.knn_acc,
        s.flop_ratio,
        s.last.loss_ssl,
        out.display()
    );
    Ok(())
}

fn eval_knn(c: &Common) -> Result<()> {
    let ck = require_checkpoint(c)?;
    let cfg = resolve(c, Some(&ck))?;
    let bank = load_images(&cfg, Split::Train)?;
    let queries = load_images(&cfg, split_of(c)?)?;
    let acc = eval::knn_eval(&ck.model, &bank, &queries, cfg.eval_batch_size, cfg.eval_k)?;
    let (stats, _) = eval::sparse_run(&ck.model, &queries, cfg.eval_batch_size)?;
    let budget = eval::budget_summary(&stats)?;
    if let Some(out) = &c.out {
        let (file, dir) = out_paths(out, "knn.json");
        echo(&dir, &cfg)?;
        let report = serde_json::json!({ "knn_acc": acc, "k": cfg.eval_k, "flop_ratio": budget.flop_ratio, "budget": budget });
        write_file(&file, &to_json(&report))?;
    }
    println!("knn@{}={acc:.4} flop_ratio={:.4}", cfg.eval_k, budget.flop_ratio);
    Ok(())
}

fn analyze(c: &Common) -> Result<()> {
    let ck = require_checkpoint(c)?;
    let cfg = resolve(c, Some(&ck))?;
    let out = c.out.clone().ok_or_else(|| Error::config("--out", "analyze-gates needs an output directory"))?;
    let bank = load_images(&cfg, Split::Train)?;
    let split = load_images(&cfg, split_of(c)?)?;
    let knn_acc = eval::knn_eval(&ck.model, &bank, &split, cfg.eval_batch_size, cfg.eval_k)?;
    let (stats, usage) = eval::sparse_run(&ck.model, &split, cfg.eval_batch_size)?;
    let usage = usage.finish()?;
    let budget = eval::budget_summary(&stats)?;
    let summary = AnalysisSummary {
        t_d: cfg.train.budget.target,
        knn_acc,
        k: cfg.eval_k,
        flop_ratio: budget.flop_ratio,
        flop_ratio_conv: budget.flop_ratio_conv,
        samples: usage.samples,
        blocks: eval::categories(&usage),
    };
    echo(&out, &cfg)?;
    write_file(&out.join("channel_usage.csv"), eval::usage_csv(&usage).as_bytes())?;
    write_file(&out.join("summary.json"), &to_json(&summary))?;
    let total = |f: fn(&eval::BlockCategories) -> usize| summary.blocks.iter().map(f).sum::<usize>();
    println!(
        "knn@{}={knn_acc:.4} flop_ratio={:.4} always_off={} always_on={} dynamic={}",
        cfg.eval_k,
        budget.flop_ratio,
        total(|b| b.always_off),
        total(|b| b.always_on),
        total(|b| b.dynamic)
    );
    Ok(())
}

fn count_flops(c: &Common, dense: bool) -> Result<()> {
    let ck = load_checkpoint(c)?;
    let cfg = resolve(c, ck.as_ref())?;
    let model = match ck {
        Some(ck) => ck.model,
        None => chansel_core::model::Model::new(&cfg.backbone_config(), &cfg.heads, cfg.seed)?,
    };
    let report = if dense {
        eval::flop_count(&model, None, "dense")
    } else {
        let images = load_images(&cfg, split_of(c)?)?;
        let (stats, _) = eval::sparse_run(&model, &images, cfg.eval_batch_size)?;
        eval::flop_count(&model, Some(&stats), &c.split)
    };
    let json = to_json(&report);
    match &c.out {
        Some(out) => {
            let (file, dir) = out_paths(out, "flops.json");
            echo(&dir, &cfg)?;
            write_file(&file, &json)?;
        }
        None => print!("{}", String::from_utf8_lossy(&json)),
    }
    println!("flop_ratio={:.4} F_dense={} F_dynamic_mean={:.1}", report.totals.ratio, report.totals.f_dense, report.totals.f_dynamic_mean);
    Ok(())
}

fn infer(c: &Common) -> Result<()> {
    let ck = require_checkpoint(c)?;
    let cfg = resolve(c, Some(&ck))?;
    let out = c.out.clone().ok_or_else(|| Error::config("--out", "infer needs an output path"))?;
    let images = load_images(&cfg, split_of(c)?)?;
    let (stats, _) = eval::sparse_run(&ck.model, &images, cfg.eval_batch_size)?;
    let (file, dir) = out_paths(&out, "stats.json");
    echo(&dir, &cfg)?;
    write_file(&file, &to_json(&eval::infer_stats(&stats)))?;
    let budget = eval::budget_summary(&stats)?;
    println!("samples={} flop_ratio={:.4} flop_ratio_conv={:.4}", stats.samples(), budget.flop_ratio, budget.flop_ratio_conv);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Train(c) | Command::EvalKnn(c) | Command::AnalyzeGates(c) | Command::Infer(c) => c,
        Command::CountFlops { common, .. } => common,
    };
    if common.threads == 0 {
        return Err(Error::config("--threads", "must be >= 1").into());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(common.threads).build().context("building thread pool")?;
    pool.install(|| match &cli.command {
        Command::Train(c) => train(c),
        Command::EvalKnn(c) => eval_knn(c),
        Command::AnalyzeGates(c) => analyze(c),
        Command::CountFlops { common, dense } => count_flops(common, *dense),
        Command::Infer(c) => infer(c),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code)
        }
    }
}
