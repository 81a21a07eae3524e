//! Checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "CHANSEL\0"
//! version  u32      FORMAT_VERSION
//! hlen     u32      header length in bytes
//! header   hlen     UTF-8 `key = value` lines: the resolved run config plus
//!                   `checkpoint.epochs_done`
//! count    u32      number of blobs
//! blob*    kind u8 (0 parameter, 1 running mean, 2 running variance,
//!          3 momentum buffer), name length u16, name bytes, rank u8,
//!          rank x u32 dims, prod(dims) x f32 values
//! ```
//!
//! Blobs appear in model registration order. Momentum buffers are optional;
//! without them a resumed run starts from zero velocity.

use std::fs;
use std::path::Path;

use chansel_core::model::Model;
use chansel_core::trainer::Sgd;
use chansel_core::Tensor;

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CHANSEL\0";
pub const FORMAT_VERSION: u32 = 1;
const EPOCH_KEY: &str = "checkpoint.epochs_done";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Param = 0,
    Mean = 1,
    Var = 2,
    Momentum = 3,
}

#[derive(Clone, Debug)]
struct Blob {
    kind: Kind,
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Number of completed training epochs.
    pub epochs_done: usize,
    pub model: Model<f32>,
    pub momentum: Option<Vec<Vec<f32>>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.config.render();
        header.push_str(&format!("{EPOCH_KEY} = {}\n", self.epochs_done));
        let mut blobs = Vec::new();
        for p in self.model.store.params() {
            blobs.push(Blob { kind: Kind::Param, name: p.name.clone(), shape: p.value.shape().to_vec(), values: p.value.data().to_vec() });
        }
        for (name, s) in self.model.store.all_stats() {
            blobs.push(Blob { kind: Kind::Mean, name: name.clone(), shape: vec![s.mean.len()], values: s.mean.clone() });
            blobs.push(Blob { kind: Kind::Var, name: name.clone(), shape: vec![s.var.len()], values: s.var.clone() });
        }
        if let Some(bufs) = &self.momentum {
            for (p, b) in self.model.store.params().iter().zip(bufs) {
                blobs.push(Blob { kind: Kind::Momentum, name: p.name.clone(), shape: p.value.shape().to_vec(), values: b.clone() });
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for b in &blobs {
            out.push(b.kind as u8);
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Artifact("not a chansel checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Artifact(format!("checkpoint format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Artifact("header is not UTF-8".into()))?;
        let mut config = RunConfig::default();
        let mut epochs_done = None;
        let mut rest = String::new();
        for line in header.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == EPOCH_KEY => {
                    epochs_done = Some(v.trim().parse().map_err(|_| Error::Artifact(format!("bad {EPOCH_KEY}: {v}")))?)
                }
                _ => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        config.apply_text(&rest).map_err(|e| Error::Artifact(format!("checkpoint header: {e}")))?;
        let epochs_done = epochs_done.ok_or_else(|| Error::Artifact(format!("header lacks {EPOCH_KEY}")))?;

        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = match r.take(1)?[0] {
                0 => Kind::Param,
                1 => Kind::Mean,
                2 => Kind::Var,
                3 => Kind::Momentum,
                k => return Err(Error::Artifact(format!("unknown blob kind {k} at byte {}", r.pos - 1))),
            };
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Artifact("blob name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            blobs.push(Blob { kind, name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Artifact(format!("{} trailing bytes after the last blob", bytes.len() - r.pos)));
        }

        let mut model = Model::<f32>::new(&config.backbone_config(), &config.heads, config.seed)
            .map_err(|e| Error::Artifact(format!("checkpoint config: {e}")))?;
        let mut it = blobs.into_iter().peekable();
        for p in model.store.params_mut() {
            let b = expect(it.next(), Kind::Param, &p.name)?;
            if b.shape != p.value.shape() {
                return Err(Error::Artifact(format!("{}: shape {:?} vs model {:?}", p.name, b.shape, p.value.shape())));
            }
            p.value = Tensor::new(&b.shape, b.values)?;
        }
        for (name, s) in model.store.all_stats_mut() {
            for (kind, dst) in [(Kind::Mean, &mut s.mean), (Kind::Var, &mut s.var)] {
                let b = expect(it.next(), kind, name)?;
                if b.values.len() != dst.len() {
                    return Err(Error::Artifact(format!("{name}: {} running values vs {} channels", b.values.len(), dst.len())));
                }
                *dst = b.values;
            }
        }
        let momentum = if it.peek().is_some() {
            let mut bufs = Vec::new();
            for p in model.store.params() {
                let b = expect(it.next(), Kind::Momentum, &p.name)?;
                if b.values.len() != p.value.len() {
                    return Err(Error::Artifact(format!("{}: momentum length {}", p.name, b.values.len())));
                }
                bufs.push(b.values);
            }
            Some(bufs)
        } else {
            None
        };
        if let Some(b) = it.next() {
            return Err(Error::Artifact(format!("unexpected blob {}", b.name)));
        }
        Ok(Self { config, epochs_done, model, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Artifact(m) => Error::Artifact(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Optimizer with the stored momentum, if any.
    pub fn sgd(&self) -> Sgd {
        let t = &self.config.train;
        let mut sgd = Sgd::new(t.momentum, t.weight_decay, &self.model.store);
        if let Some(m) = &self.momentum {
            sgd.buffers = m.clone();
        }
        sgd
    }

    /// Fails unless `other` describes the same network.
    pub fn check_compatible(&self, other: &RunConfig) -> Result<()> {
        let (a, b) = (&self.config, other);
        if a.backbone_config() != b.backbone_config() || a.heads != b.heads {
            return Err(Error::Artifact(format!(
                "checkpoint network (widths {:?}, {} blocks/stage, r={}, side {}) does not match the config (widths {:?}, {} blocks/stage, r={}, side {})",
                a.backbone.widths,
                a.backbone.blocks_per_stage,
                a.backbone.reduction,
                a.input_side(),
                b.backbone.widths,
                b.backbone.blocks_per_stage,
                b.backbone.reduction,
                b.input_side()
            )));
        }
        Ok(())
    }
}

fn expect(blob: Option<Blob>, kind: Kind, name: &str) -> Result<Blob> {
    match blob {
        Some(b) if b.kind == kind && b.name == name => Ok(b),
        Some(b) => Err(Error::Artifact(format!("expected {kind:?} blob {name}, found {:?} {}", b.kind, b.name))),
        None => Err(Error::Artifact(format!("missing {kind:?} blob {name}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Artifact(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}
