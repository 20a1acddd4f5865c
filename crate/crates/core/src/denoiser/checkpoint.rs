//! Little-endian binary checkpoint.
//!
//! ```text
//! magic        8 bytes  "SDIFFCKP"
//! version      u32
//! tool_version u32 length + UTF-8
//! config_hash  u32 length + UTF-8
//! meta         u32 length + UTF-8 (free-form JSON)
//! architecture 10 × u64 (UnetConfig fields in declaration order)
//! tensors      u32 count, then per tensor:
//!              u32 name length, name, u32 rank, rank × u64 dims, f32 data
//! optimizer    u8 flag; if 1: u64 step, then m and v for every tensor (f32, same order)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Unet, UnetConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SDIFFCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adaptive-moment state aligned with the checkpoint tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tool_version: String,
    pub config_hash: String,
    pub meta: String,
    pub config: UnetConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Unet<f32>, config_hash: &str, meta: &str, optimizer: Option<OptimizerState>) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            meta: meta.to_string(),
            config: *model.config(),
            tensors: model
                .params()
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.shape.clone(), e.value.clone()))
                .collect(),
            optimizer,
        }
    }

    pub fn to_model(&self) -> Result<Unet<f32>> {
        let mut model = Unet::new(self.config, 0, true)?;
        model.load_params(self.tensors.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for s in [&self.tool_version, &self.config_hash, &self.meta] {
            put_str(&mut out, s);
        }
        let c = &self.config;
        for v in [
            c.latent_channels as u64,
            c.base_width as u64,
            c.levels as u64,
            c.token_dim as u64,
            c.heads as u64,
            c.norm_groups as u64,
            c.patch as u64,
            c.time_dim as u64,
            c.embed_patch as u64,
            c.embed_seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, data);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for buf in o.m.iter().chain(&o.v) {
                    put_f32s(&mut out, buf);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let tool_version = r.string()?;
        let config_hash = r.string()?;
        let meta = r.string()?;
        let mut arch = [0u64; 10];
        for a in &mut arch {
            *a = r.u64()?;
        }
        let config = UnetConfig {
            latent_channels: arch[0] as usize,
            base_width: arch[1] as usize,
            levels: arch[2] as usize,
            token_dim: arch[3] as usize,
            heads: arch[4] as usize,
            norm_groups: arch[5] as usize,
            patch: arch[6] as usize,
            time_dim: arch[7] as usize,
            embed_patch: arch[8] as usize,
            embed_seed: arch[9],
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::data(format!("tensor {name} has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::data(format!("tensor {name} is too large")))?;
            let data = r.f32s(len)?;
            tensors.push((name, shape, data));
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut bufs = Vec::with_capacity(2 * count);
                for (_, _, data) in tensors.iter().chain(&tensors) {
                    bufs.push(r.f32s(data.len())?);
                }
                let v = bufs.split_off(count);
                Some(OptimizerState { step, m: bufs, v })
            }
            f => return Err(Error::data(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint"));
        }
        Ok(Self {
            tool_version,
            config_hash,
            meta,
            config,
            tensors,
            optimizer,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::data("checkpoint string is not UTF-8"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::data("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Writes to a temporary sibling and renames, so readers never see a partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Unet<f32> {
        let cfg = UnetConfig {
            base_width: 8,
            token_dim: 6,
            heads: 2,
            norm_groups: 4,
            time_dim: 8,
            ..UnetConfig::default()
        };
        Unet::new(cfg, 11, false).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small();
        let opt = OptimizerState {
            step: 17,
            m: model.params().entries().iter().map(|e| vec![0.25; e.value.len()]).collect(),
            v: model.params().entries().iter().map(|e| vec![f32::MIN_POSITIVE; e.value.len()]).collect(),
        };
        let ck = Checkpoint::from_model(&model, "abc", "{\"k\":1}", Some(opt));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model().unwrap();
        assert_eq!(restored.params(), model.params());
        assert_eq!(restored.generation_token(), model.generation_token());
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::from_model(&small(), "h", "", None);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let mut ck = Checkpoint::from_model(&small(), "h", "", None);
        ck.config.base_width = 16;
        assert!(ck.to_model().is_err());
    }
}
