//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! A CIFAR-10 record is one label byte followed by 3072 pixel bytes (1024 red,
//! 1024 green, 1024 blue, each plane row-major 32x32). CIFAR-100 records carry
//! a coarse and a fine label byte before the pixels; the fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use chansel_core::data::LabeledImage;
use chansel_core::Tensor;

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" | "val" => Some(Split::Test),
            _ => None,
        }
    }
}

impl Variant {
    pub fn label_bytes(self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }

    /// Directory name produced by the official archives.
    pub fn subdir(self) -> &'static str {
        match self {
            Variant::Cifar10 => "cifar-10-batches-bin",
            Variant::Cifar100 => "cifar-100-binary",
        }
    }

    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Variant::Cifar10, Split::Train) => {
                vec!["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"]
            }
            (Variant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (Variant::Cifar100, Split::Train) => vec!["train.bin"],
            (Variant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

/// One decoded record. `coarse` is only present for CIFAR-100.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub coarse: Option<u8>,
    pub image: LabeledImage,
}

/// Decodes a whole batch file. `path` is only used in error messages.
pub fn parse_records(bytes: &[u8], variant: Variant, path: &Path) -> Result<Vec<Record>> {
    let len = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(len) {
        let whole = (bytes.len() / len * len) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole,
            message: format!("length {} is not a positive multiple of the {len}-byte record", bytes.len()),
        });
    }
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, rec)| decode(rec, variant).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            offset: (i * len + variant.label_bytes() - 1) as u64,
            message,
        }))
        .collect()
}

fn decode(rec: &[u8], variant: Variant) -> std::result::Result<Record, String> {
    let nl = variant.label_bytes();
    let label = rec[nl - 1] as usize;
    if label >= variant.num_classes() {
        return Err(format!("label {label} out of range for {} classes", variant.num_classes()));
    }
    let coarse = (variant == Variant::Cifar100).then(|| rec[0]);
    if let Some(c) = coarse {
        if c >= 20 {
            return Err(format!("coarse label {c} out of range for 20 classes"));
        }
    }
    let pixels: Vec<f32> = rec[nl..].iter().map(|&b| b as f32 / 255.0).collect();
    let tensor = Tensor::new(&[3, SIDE, SIDE], pixels).map_err(|e| e.to_string())?;
    let image = LabeledImage::new(tensor, label).map_err(|e| e.to_string())?;
    Ok(Record { coarse, image })
}

/// Inverse of decoding: rebuilds the on-disk bytes of one record.
pub fn encode_record(record: &Record, variant: Variant) -> Vec<u8> {
    let mut out = Vec::with_capacity(variant.record_len());
    if variant == Variant::Cifar100 {
        out.push(record.coarse.unwrap_or(0));
    }
    out.push(record.image.label as u8);
    out.extend(record.image.pixels.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

/// Accepts either the directory holding the batch files or its parent.
pub fn resolve_root(dir: &Path, variant: Variant) -> Result<PathBuf> {
    let nested = dir.join(variant.subdir());
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let probe = root.join(variant.files(Split::Test)[0]);
    if !probe.is_file() {
        return Err(Error::config(
            "--data-dir",
            format!("{} does not contain {} (or {}/)", dir.display(), variant.files(Split::Test)[0], variant.subdir()),
        ));
    }
    Ok(root)
}

pub fn read_file(path: &Path, variant: Variant) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, variant, path)
}

/// Loads a split, keeping at most `limit` images (0 = all).
///
/// A limited load is class-balanced: files are scanned in order and each class
/// keeps its first `limit / classes` images (the first `limit % classes`
/// classes take one extra), so the subset is a fixed function of the files.
pub fn load_split(dir: &Path, variant: Variant, split: Split, limit: usize) -> Result<Vec<LabeledImage>> {
    let root = resolve_root(dir, variant)?;
    let k = variant.num_classes();
    let quota: Vec<usize> = (0..k).map(|c| limit / k + usize::from(c < limit % k)).collect();
    let mut taken = vec![0usize; k];
    let mut out = Vec::new();
    for name in variant.files(split) {
        for rec in read_file(&root.join(name), variant)? {
            let c = rec.image.label;
            if limit == 0 || taken[c] < quota[c] {
                taken[c] += 1;
                out.push(rec.image);
            }
        }
        if limit > 0 && out.len() == limit {
            break;
        }
    }
    Ok(out)
}
