//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "EGLRCKPT"
//! version      u32      FORMAT_VERSION
//! kind         u8       1 = evaluator, 2 = generator
//! config_len   u32      followed by config_len bytes of UTF-8 TOML
//! n_tensors    u32
//! per tensor, in lexicographic name order:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, dims u32 × rank
//!   payload f64 × product(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"EGLRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Evaluator,
    Generator,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Evaluator => 1,
            ModelKind::Generator => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(ModelKind::Evaluator),
            2 => Ok(ModelKind::Generator),
            t => Err(Error::Checkpoint(format!("unknown model kind tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ExperimentConfig,
    pub params: ParameterSet,
}

pub fn encode(kind: ModelKind, config: &ExperimentConfig, params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind.tag());
    let cfg = config.to_toml();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let kind = ModelKind::from_tag(r.take(1)?[0])?;
    let cfg_len = r.u32()? as usize;
    let config = ExperimentConfig::from_toml(&r.string(cfg_len)?)?;
    let n = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let payload = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        params.insert(name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(Checkpoint { kind, config, params })
}

pub fn save(path: &Path, kind: ModelKind, config: &ExperimentConfig, params: &ParameterSet) -> Result<()> {
    fs::write(path, encode(kind, config, params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Checks that `params` has exactly the names and shapes of `reference`.
pub fn check_compatible(params: &ParameterSet, reference: &ParameterSet) -> Result<()> {
    for (name, t) in reference.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("checkpoint is missing tensor {name}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, architecture expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if params.len() != reference.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture expects {}",
            params.len(),
            reference.len()
        )));
    }
    Ok(())
}
