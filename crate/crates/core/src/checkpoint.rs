//! Binary parameter snapshots.
//!
//! Layout: magic `BIMK1`, little-endian u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, a u8 rank, rank u32 extents and the raw
//! f32 little-endian values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::NamedTensorSet;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"BIMK1";
pub const FORMAT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunMeta {
    pub stage: u32,
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: RunMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn small_int(v: u64) -> f32 {
    v as f32
}

impl Checkpoint {
    /// Snapshot of every tensor in the store, buffers included.
    pub fn capture<S: Scalar>(store: &NamedTensorSet<S>, meta: RunMeta) -> Self {
        let tensors = store.iter().map(|(n, e)| (n.to_string(), e.tensor.cast::<f32>())).collect();
        Self { meta, tensors }
    }

    fn meta_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let seed: Vec<f32> = (0..4).map(|i| small_int((self.meta.seed >> (16 * i)) & 0xffff)).collect();
        vec![
            ("meta.version".into(), Tensor::scalar(small_int(FORMAT_VERSION as u64))),
            ("meta.stage".into(), Tensor::scalar(small_int(self.meta.stage as u64))),
            ("meta.epoch".into(), Tensor::scalar(small_int(self.meta.epoch as u64))),
            ("meta.seed".into(), Tensor::new(&[4], seed).expect("four seed chunks")),
        ]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let all: Vec<(String, Tensor<f32>)> = self.meta_tensors().into_iter().chain(self.tensors.iter().cloned()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in &all {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
                return Err(ckpt_err(format!("tensor `{name}` cannot be encoded")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| ckpt_err("truncated header"))?;
        if &magic != MAGIC {
            return Err(ckpt_err("bad magic, not a BIMK1 checkpoint"));
        }
        let count = read_u32(&mut r)?;
        let mut meta = RunMeta::default();
        let mut version = None;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb).map_err(|_| ckpt_err("truncated name"))?;
            let name = String::from_utf8(nb).map_err(|_| ckpt_err("tensor name is not UTF-8"))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|_| ckpt_err("truncated rank"))?;
            let shape = (0..rank[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if r.len() < numel * 4 {
                return Err(ckpt_err(format!("truncated data for `{name}`")));
            }
            let (raw, rest) = r.split_at(numel * 4);
            r = rest;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(&shape, data).map_err(|e| ckpt_err(format!("`{name}`: {e}")))?;
            match name.as_str() {
                "meta.version" => version = Some(t.item() as u32),
                "meta.stage" => meta.stage = t.item() as u32,
                "meta.epoch" => meta.epoch = t.item() as u32,
                "meta.seed" => {
                    meta.seed = t.data().iter().enumerate().map(|(i, &c)| (c as u64) << (16 * i)).sum();
                }
                n if n.starts_with(META_PREFIX) => return Err(ckpt_err(format!("unknown metadata `{n}`"))),
                _ => tensors.push((name, t)),
            }
        }
        if !r.is_empty() {
            return Err(ckpt_err("trailing bytes after last tensor"));
        }
        match version {
            Some(FORMAT_VERSION) => Ok(Self { meta, tensors }),
            Some(v) => Err(ckpt_err(format!("unsupported format version {v}"))),
            None => Err(ckpt_err("missing format version")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Overwrites every tensor of `store`. Missing, extra or misshapen
    /// tensors are errors, so a checkpoint only loads into the architecture
    /// that wrote it.
    pub fn restore_into<S: Scalar>(&self, store: &mut NamedTensorSet<S>) -> Result<()> {
        for (name, t) in &self.tensors {
            if !store.contains(name) {
                return Err(ckpt_err(format!("checkpoint tensor `{name}` has no counterpart in the model")));
            }
            store.set(name, t.cast::<S>()).map_err(|e| ckpt_err(format!("`{name}`: {e}")))?;
        }
        if self.tensors.len() != store.len() {
            let have: std::collections::HashSet<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
            let missing: Vec<String> = store.names().into_iter().filter(|n| !have.contains(n.as_str())).collect();
            return Err(ckpt_err(format!("checkpoint lacks {}", missing.join(", "))));
        }
        Ok(())
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| ckpt_err("truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| ckpt_err("truncated u16"))?;
    Ok(u16::from_le_bytes(b))
}

/// Path of the run configuration written next to a checkpoint.
pub fn config_sidecar(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}
