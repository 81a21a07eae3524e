//! `key = value` run configuration.
//!
//! One setting per line, dotted keys (`train.epochs = 50`), `#` starts a
//! comment. Overrides given as `--set key=value` are applied after the file.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chansel_core::backbone::BackboneConfig;
use chansel_core::data::AugmentationConfig;
use chansel_core::simsiam::HeadsConfig;
use chansel_core::trainer::TrainConfig;

use crate::cifar::{self, Variant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            DatasetKind::Cifar10 => Some(Variant::Cifar10),
            DatasetKind::Cifar100 => Some(Variant::Cifar100),
            DatasetKind::Synthetic => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub dir: Option<PathBuf>,
    /// Training images kept (0 = all), class-balanced.
    pub train_limit: usize,
    pub val_limit: usize,
    pub synthetic_classes: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_val_per_class: usize,
    pub synthetic_side: usize,
    pub synthetic_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub ssl_only: bool,
    pub augment: AugmentationConfig,
    /// `None` picks the side-dependent default.
    pub blur_p: Option<f64>,
    pub eval_batch_size: usize,
    pub eval_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                dataset: DatasetKind::Cifar10,
                dir: None,
                train_limit: 5000,
                val_limit: 1000,
                synthetic_classes: 4,
                synthetic_train_per_class: 64,
                synthetic_val_per_class: 16,
                synthetic_side: 16,
                synthetic_seed: 0,
            },
            backbone: BackboneConfig::desk(),
            heads: HeadsConfig::desk(),
            train: TrainConfig::desk(),
            checkpoint_every: 10,
            ssl_only: false,
            augment: AugmentationConfig::for_side(32),
            blur_p: None,
            eval_batch_size: 256,
            eval_k: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match value.split(',').map(str::trim).collect::<Vec<_>>()[..] {
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(Error::config(key, format!("expected two comma-separated numbers, got {value:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads a config file and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::config("--set", format!("expected key=value, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.augment;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.dataset" => {
                self.data.dataset = match value {
                    "cifar10" => DatasetKind::Cifar10,
                    "cifar100" => DatasetKind::Cifar100,
                    "synthetic" => DatasetKind::Synthetic,
                    _ => return Err(Error::config(key, format!("expected cifar10, cifar100 or synthetic, got {value:?}"))),
                }
            }
            "data.dir" => self.data.dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.train_limit" => self.data.train_limit = parse(key, value)?,
            "data.val_limit" => self.data.val_limit = parse(key, value)?,
            "data.synthetic_classes" => self.data.synthetic_classes = parse(key, value)?,
            "data.synthetic_train_per_class" => self.data.synthetic_train_per_class = parse(key, value)?,
            "data.synthetic_val_per_class" => self.data.synthetic_val_per_class = parse(key, value)?,
            "data.synthetic_side" => self.data.synthetic_side = parse(key, value)?,
            "data.synthetic_seed" => self.data.synthetic_seed = parse(key, value)?,
            "backbone.widths" => self.backbone.widths = parse_list(key, value)?,
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage = parse(key, value)?,
            "backbone.reduction" => self.backbone.reduction = parse(key, value)?,
            "heads.proj_layers" => self.heads.proj_layers = parse(key, value)?,
            "heads.proj_hidden" => self.heads.proj_hidden = parse(key, value)?,
            "heads.proj_dim" => self.heads.proj_dim = parse(key, value)?,
            "heads.pred_hidden" => self.heads.pred_hidden = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.base_lr" => t.base_lr = parse(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.momentum" => t.momentum = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.tau_start" => t.tau_start = parse(key, value)?,
            "train.tau_end" => t.tau_end = parse(key, value)?,
            "train.gate_lr_scale" => t.gate_lr_scale = parse(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train.ssl_only" => self.ssl_only = parse_bool(key, value)?,
            "budget.t_d" => t.budget.target = parse(key, value)?,
            "budget.lambda" => t.budget.lambda = parse(key, value)?,
            "budget.gamma" => t.budget.gamma = parse(key, value)?,
            "budget.bound_horizon" => t.budget.bound_horizon = parse(key, value)?,
            "augment.crop_scale" => a.crop_scale = parse_pair(key, value)?,
            "augment.crop_ratio" => a.crop_ratio = parse_pair(key, value)?,
            "augment.brightness" => a.jitter[0] = parse(key, value)?,
            "augment.contrast" => a.jitter[1] = parse(key, value)?,
            "augment.saturation" => a.jitter[2] = parse(key, value)?,
            "augment.hue" => a.jitter[3] = parse(key, value)?,
            "augment.jitter_p" => a.jitter_p = parse(key, value)?,
            "augment.grayscale_p" => a.grayscale_p = parse(key, value)?,
            "augment.blur_p" => self.blur_p = if value == "auto" { None } else { Some(parse(key, value)?) },
            "augment.blur_sigma" => a.blur_sigma = parse_pair(key, value)?,
            "augment.flip_p" => a.flip_p = parse(key, value)?,
            "eval.batch_size" => self.eval_batch_size = parse(key, value)?,
            "eval.k" => self.eval_k = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn input_side(&self) -> usize {
        match self.data.dataset {
            DatasetKind::Synthetic => self.data.synthetic_side,
            _ => cifar::SIDE,
        }
    }

    /// Backbone with the input side implied by the dataset.
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig { input_side: self.input_side(), ..self.backbone.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn augment_config(&self) -> AugmentationConfig {
        let base = AugmentationConfig::for_side(self.input_side());
        AugmentationConfig { blur_p: self.blur_p.unwrap_or(base.blur_p), seed: self.seed, ..self.augment.clone() }
    }

    /// Checks every invariant; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let field = |msg: &str| {
            msg.split_whitespace()
                .find(|w| w.contains('.') && w.chars().next().is_some_and(char::is_alphabetic))
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '.').to_string())
        };
        let wrap = |section: &str, e: chansel_core::Error| {
            let msg = match &e {
                chansel_core::Error::Config(m) => m.clone(),
                other => other.to_string(),
            };
            Error::config(field(&msg).unwrap_or_else(|| section.to_string()), msg)
        };
        self.backbone_config().validate().map_err(|e| wrap("backbone", e))?;
        self.heads.validate().map_err(|e| wrap("heads", e))?;
        self.train_config().validate().map_err(|e| wrap("train", e))?;
        self.augment_config().validate().map_err(|e| wrap("augment", e))?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be >= 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be >= 1"));
        }
        if self.eval_k == 0 {
            return Err(Error::config("eval.k", "must be >= 1"));
        }
        if self.data.dataset == DatasetKind::Synthetic {
            let d = &self.data;
            if d.synthetic_classes < 2 || d.synthetic_train_per_class == 0 || d.synthetic_val_per_class == 0 {
                return Err(Error::config("data.synthetic_classes", "need >= 2 classes and >= 1 image per class and split"));
            }
        }
        Ok(())
    }

    /// Fully resolved settings, one `key = value` line each, in a stable order.
    pub fn render(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let a = self.augment_config();
        let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data.dataset", d.dataset.name().into()),
            ("data.dir", d.dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.train_limit", d.train_limit.to_string()),
            ("data.val_limit", d.val_limit.to_string()),
            ("data.synthetic_classes", d.synthetic_classes.to_string()),
            ("data.synthetic_train_per_class", d.synthetic_train_per_class.to_string()),
            ("data.synthetic_val_per_class", d.synthetic_val_per_class.to_string()),
            ("data.synthetic_side", d.synthetic_side.to_string()),
            ("data.synthetic_seed", d.synthetic_seed.to_string()),
            ("backbone.widths", join(&self.backbone.widths)),
            ("backbone.blocks_per_stage", self.backbone.blocks_per_stage.to_string()),
            ("backbone.reduction", self.backbone.reduction.to_string()),
            ("heads.proj_layers", self.heads.proj_layers.to_string()),
            ("heads.proj_hidden", self.heads.proj_hidden.to_string()),
            ("heads.proj_dim", self.heads.proj_dim.to_string()),
            ("heads.pred_hidden", self.heads.pred_hidden.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.tau_start", t.tau_start.to_string()),
            ("train.tau_end", t.tau_end.to_string()),
            ("train.gate_lr_scale", t.gate_lr_scale.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.ssl_only", self.ssl_only.to_string()),
            ("budget.t_d", t.budget.target.to_string()),
            ("budget.lambda", t.budget.lambda.to_string()),
            ("budget.gamma", t.budget.gamma.to_string()),
            ("budget.bound_horizon", t.budget.bound_horizon.to_string()),
            ("augment.crop_scale", pair(a.crop_scale)),
            ("augment.crop_ratio", pair(a.crop_ratio)),
            ("augment.brightness", a.jitter[0].to_string()),
            ("augment.contrast", a.jitter[1].to_string()),
            ("augment.saturation", a.jitter[2].to_string()),
            ("augment.hue", a.jitter[3].to_string()),
            ("augment.jitter_p", a.jitter_p.to_string()),
            ("augment.grayscale_p", a.grayscale_p.to_string()),
            ("augment.blur_p", a.blur_p.to_string()),
            ("augment.blur_sigma", pair(a.blur_sigma)),
            ("augment.flip_p", a.flip_p.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            ("eval.k", self.eval_k.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back_to_the_same_config() {
        let mut cfg = RunConfig::default();
        cfg.set("budget.t_d", "0.3").unwrap();
        cfg.set("backbone.widths", "8, 16").unwrap();
        let mut again = RunConfig::default();
        again.apply_text(&cfg.render()).unwrap();
        assert_eq!(again.render(), cfg.render());
        assert_eq!(again.train.budget.target, 0.3);
    }
}
