//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "SVAE1\n"            magic
//! u32                  version (1)
//! u32 + bytes          config block, sorted key=value lines
//! u32 + bytes          vocabulary, one token per line
//! f64 f64              property mean, std
//! u32                  tensor count, then per tensor in name order:
//!   u32 + bytes        name
//!   u8                 dtype (0 = f32)
//!   u32, u32 * rank    rank and dims
//!   f32 * n            payload
//! ```
//!
//! Optimizer moments are stored as tensors named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, StarVae};
use crate::numerics::{Adam, Tensor};
use crate::selfies::Vocabulary;

pub const MAGIC: &[u8; 6] = b"SVAE1\n";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Which objective last wrote the optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// Training-set statistics used to normalize property values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropertyNorm {
    pub mean: f64,
    pub std: f64,
}

impl PropertyNorm {
    pub const IDENTITY: PropertyNorm = PropertyNorm { mean: 0.0, std: 1.0 };

    pub fn fit(values: &[f64]) -> Result<PropertyNorm> {
        if values.is_empty() {
            return Err(Error::Empty("no property values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0 && var.is_finite()) {
            return Err(Error::domain("property values have zero variance"));
        }
        Ok(PropertyNorm {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StarVae<f32>,
    pub vocab: Vocabulary,
    pub norm: PropertyNorm,
    pub phase: Phase,
    pub optimizer: Adam<f32>,
}

impl Checkpoint {
    pub fn new(model: StarVae<f32>, vocab: Vocabulary, lr: f64) -> Result<Checkpoint> {
        if model.config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} but the vocabulary has {} tokens",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint {
            model,
            vocab,
            norm: PropertyNorm::IDENTITY,
            phase: Phase::Pretrain,
            optimizer: Adam::new(lr),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = KeyValues::default();
        self.model.config.write_to(&mut kv);
        kv.set("phase", self.phase.name());
        kv.set("optimizer.lr", self.optimizer.lr);
        kv.set("optimizer.step", self.optimizer.step_count());

        let mut tensors: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
        for (name, t) in self.model.params.iter() {
            tensors.insert(name.to_string(), t);
        }
        for (name, m, v) in self.optimizer.moments() {
            tensors.insert(format!("{MOMENT_M}{name}"), m);
            tensors.insert(format!("{MOMENT_V}{name}"), v);
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_block(&mut out, kv.to_text().as_bytes());
        put_block(&mut out, self.vocab.to_text().as_bytes());
        out.extend_from_slice(&self.norm.mean.to_le_bytes());
        out.extend_from_slice(&self.norm.std.to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_block(&mut out, name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kv = KeyValues::parse(&r.text()?)?;
        let vocab = Vocabulary::from_text(&r.text()?)?;
        let norm = PropertyNorm {
            mean: r.f64()?,
            std: r.f64()?,
        };
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for _ in 0..count {
            let name = r.text()?;
            if r.take(1)?[0] != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor '{name}' has an unknown dtype")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data)?;
            if let Some(p) = name.strip_prefix(MOMENT_M) {
                first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(MOMENT_V) {
                second.insert(p.to_string(), t);
            } else {
                params.insert(&name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let mut known: Vec<&str> = ModelConfig::KEYS.to_vec();
        known.extend(["phase", "optimizer.lr", "optimizer.step"]);
        kv.reject_unknown(&known)?;
        let config = ModelConfig::desk(vocab.len()).with_overrides(&kv)?;
        let phase = match kv.get_str("phase") {
            Some("pretrain") => Phase::Pretrain,
            Some("finetune") => Phase::Finetune,
            other => return Err(Error::Checkpoint(format!("bad phase {other:?}"))),
        };
        let lr: f64 = required(&kv, "optimizer.lr")?;
        let step: u64 = required(&kv, "optimizer.step")?;
        if first.keys().ne(second.keys()) {
            return Err(Error::Checkpoint("optimizer moments are incomplete".into()));
        }
        let moments = first
            .into_iter()
            .map(|(k, m)| {
                let v = second.remove(&k).expect("keys checked");
                (k, m, v)
            })
            .collect::<Vec<_>>();
        let model = StarVae::from_params(config, params)?;
        let ckpt = Checkpoint {
            model,
            vocab,
            norm,
            phase,
            optimizer: Adam::restore(lr, step, moments),
        };
        if ckpt.model.config.vocab_size != ckpt.vocab.len() {
            return Err(Error::Checkpoint("vocabulary size disagrees with the config".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn required<V: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<V> {
    kv.get(key)?
        .ok_or_else(|| Error::Checkpoint(format!("missing '{key}'")))
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint("block is not UTF-8".into()))
    }
}
