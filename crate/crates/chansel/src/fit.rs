//! Training driver: epochs, CSV logs, periodic checkpoints, final summary.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chansel_core::data::LabeledImage;
use chansel_core::model::Model;
use chansel_core::trainer::{EpochMetrics, Trainer};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{budget_summary, knn_eval, sparse_run, BudgetSummary};

pub const METRICS_HEADER: &str = "epoch,loss_ssl,loss_gate,flop_ratio,lr,tau";
pub const GATE_HEADER: &str = "epoch,block,active_mean";

pub const METRICS_FILE: &str = "metrics.csv";
pub const GATES_FILE: &str = "gate_stats.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_FILE: &str = "resolved.cfg";

#[derive(Clone, Debug, Serialize)]
pub struct FinalEpoch {
    pub epoch: usize,
    pub loss_ssl: f64,
    pub loss_gate: f64,
    /// Batch-mean ratio under training-time sampled gates.
    pub flop_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub t_d: f64,
    pub epochs: usize,
    pub train_images: usize,
    pub val_images: usize,
    #[serde(rename = "final")]
    pub last: FinalEpoch,
    pub knn_acc: f64,
    pub k: usize,
    /// Deployed ratio: hard-threshold sparse execution over the val split.
    pub flop_ratio: f64,
    pub budget: BudgetSummary,
}

pub fn checkpoint_path(out: &Path, epochs_done: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epochs_done:03}.ckpt"))
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!("{},{},{},{},{},{}", m.epoch, m.loss_ssl, m.loss_gate, m.flop_ratio, m.lr, m.tau)
}

/// Keeps the header and every row whose epoch is below `next_epoch`; used when
/// resuming so the log never holds rows the restored state has not produced.
fn truncate_log(path: &Path, header: &str, next_epoch: usize) -> Result<()> {
    let mut kept = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
            if epoch.is_some_and(|e| e < next_epoch) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("report types serialize");
    s.push(b'\n');
    s
}

/// Trains from scratch, or from `resume`, until `cfg.train.epochs` epochs are
/// done. `progress` receives one line per epoch.
pub fn fit(
    cfg: &RunConfig,
    train: &[LabeledImage],
    val: &[LabeledImage],
    out: &Path,
    resume: Option<Checkpoint>,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainSummary> {
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    write_file(&out.join(RESOLVED_FILE), cfg.render().as_bytes())?;

    let (model, sgd, start) = match resume {
        Some(ck) => {
            ck.check_compatible(cfg)?;
            let sgd = ck.sgd();
            (ck.model, Some(sgd), ck.epochs_done)
        }
        None => (Model::<f32>::new(&cfg.backbone_config(), &cfg.heads, cfg.seed)?, None, 0),
    };
    let mut trainer = Trainer::new(model, cfg.train_config(), cfg.augment_config())?;
    if let Some(sgd) = sgd {
        trainer.sgd = sgd;
    }
    trainer.next_epoch = start;
    trainer.ssl_only = cfg.ssl_only;
    if trainer.steps_per_epoch(train.len()) == 0 {
        return Err(Error::config(
            "train.batch_size",
            format!("{} training images cannot fill one batch of {}", train.len(), cfg.train.batch_size),
        ));
    }

    let metrics = out.join(METRICS_FILE);
    let gates = out.join(GATES_FILE);
    truncate_log(&metrics, METRICS_HEADER, start)?;
    truncate_log(&gates, GATE_HEADER, start)?;
    let names = trainer.model.block_names();
    let epochs = cfg.train.epochs;
    let mut last = None;
    while trainer.next_epoch < epochs {
        let m = trainer.run_epoch(train)?;
        append(&metrics, &format!("{}\n", metrics_row(&m)))?;
        let mut rows = String::new();
        for (name, a) in names.iter().zip(&m.active_mean) {
            let _ = writeln!(rows, "{},{name},{a}", m.epoch);
        }
        append(&gates, &rows)?;
        progress(&format!(
            "epoch {:>3}/{epochs} loss_ssl={:.4} loss_gate={:.5} flop_ratio={:.4} lr={:.5} tau={:.3}",
            m.epoch + 1,
            m.loss_ssl,
            m.loss_gate,
            m.flop_ratio,
            m.lr,
            m.tau
        ));
        let done = trainer.next_epoch;
        if done % cfg.checkpoint_every == 0 || done == epochs {
            let ck = Checkpoint { config: cfg.clone(), epochs_done: done, model: trainer.model.clone(), momentum: Some(trainer.sgd.buffers.clone()) };
            ck.save(&checkpoint_path(out, done))?;
            ck.save(&out.join(FINAL_CHECKPOINT))?;
        }
        last = Some(m);
    }
    let last = match last {
        Some(m) => FinalEpoch { epoch: m.epoch, loss_ssl: m.loss_ssl, loss_gate: m.loss_gate, flop_ratio: m.flop_ratio },
        None => last_logged(&metrics)?,
    };

    let model = &trainer.model;
    let knn_acc = knn_eval(model, train, val, cfg.eval_batch_size, cfg.eval_k)?;
    let (stats, _) = sparse_run(model, val, cfg.eval_batch_size)?;
    let budget = budget_summary(&stats)?;
    let summary = TrainSummary {
        t_d: cfg.train.budget.target,
        epochs,
        train_images: train.len(),
        val_images: val.len(),
        last,
        knn_acc,
        k: cfg.eval_k,
        flop_ratio: budget.flop_ratio,
        budget,
    };
    write_file(&out.join(SUMMARY_FILE), &to_json(&summary))?;
    Ok(summary)
}

fn last_logged(metrics: &Path) -> Result<FinalEpoch> {
    let text = fs::read_to_string(metrics).map_err(|e| Error::io(metrics, e))?;
    let line = text.lines().skip(1).last().ok_or_else(|| Error::Artifact(format!("{} has no epochs", metrics.display())))?;
    let f: Vec<&str> = line.split(',').collect();
    let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Artifact(format!("bad metrics row {line:?}")));
    Ok(FinalEpoch { epoch: num(0)? as usize, loss_ssl: num(1)?, loss_gate: num(2)?, flop_ratio: num(3)? })
}
