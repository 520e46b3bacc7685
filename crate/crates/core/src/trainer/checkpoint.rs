//! Single-file checkpoints: magic `TMPA1`, a tensor count, then
//! length-prefixed named tensors, all little-endian.
//!
//! Per tensor: `u32` name length, UTF-8 name, `u32` rank, `u64` per
//! dimension, raw `f64` data. Names are `param/…`, `bn/…/mean`,
//! `bn/…/var`, `mom/…`, `meta/epoch` and `meta/config` (the config text,
//! one byte per element).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::{RunningStats, Tensor};

use super::TrainConfig;

pub const MAGIC: &[u8; 5] = b"TMPA1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub momentum: BTreeMap<String, Tensor>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Resolved config text of the run that produced this checkpoint.
    pub config: String,
}

impl Checkpoint {
    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_text(&self.config)
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, t) in &self.params.tensors {
            out.push((format!("param/{k}"), t.clone()));
        }
        for (k, s) in &self.params.stats {
            out.push((format!("bn/{k}/mean"), Tensor::new(&[s.mean.len()], s.mean.clone())));
            out.push((format!("bn/{k}/var"), Tensor::new(&[s.var.len()], s.var.clone())));
        }
        for (k, t) in &self.momentum {
            out.push((format!("mom/{k}"), t.clone()));
        }
        out.push(("meta/epoch".into(), Tensor::scalar(self.epoch as f64)));
        let bytes: Vec<f64> = self.config.bytes().map(f64::from).collect();
        out.push(("meta/config".into(), Tensor::new(&[bytes.len()], bytes)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.named();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        let mut means = BTreeMap::new();
        let mut vars = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        let mut epoch = None;
        let mut config = None;
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data);
            if let Some(k) = name.strip_prefix("param/") {
                tensors.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("mom/") {
                momentum.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("bn/").and_then(|k| k.strip_suffix("/mean")) {
                means.insert(k.to_string(), t.into_data());
            } else if let Some(k) = name.strip_prefix("bn/").and_then(|k| k.strip_suffix("/var")) {
                vars.insert(k.to_string(), t.into_data());
            } else if name == "meta/epoch" {
                epoch = Some(t.item() as usize);
            } else if name == "meta/config" {
                let text: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
                config = Some(String::from_utf8(text).map_err(|_| Error::Format("config is not UTF-8".into()))?);
            } else {
                return Err(Error::Format(format!("unexpected tensor {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        let mut stats = BTreeMap::new();
        for (k, mean) in means {
            let var = vars
                .remove(&k)
                .ok_or_else(|| Error::Format(format!("batch norm {k} has no variance")))?;
            stats.insert(k, RunningStats { mean, var });
        }
        if !vars.is_empty() {
            return Err(Error::Format("batch norm variance without mean".into()));
        }
        Ok(Checkpoint {
            params: Params { tensors, stats },
            momentum,
            epoch: epoch.ok_or_else(|| Error::Format("missing meta/epoch".into()))?,
            config: config.ok_or_else(|| Error::Format("missing meta/config".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
