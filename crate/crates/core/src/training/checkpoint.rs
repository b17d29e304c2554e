//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NMTCKPT1"
//! u32 entry count
//! per entry: u32 name length, name (UTF-8), u8 dtype (1 = f64),
//!            u32 rank, u64 per dimension, row-major f64 payload
//! u64 metadata length, metadata (UTF-8 "key=value" lines)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::io::write_atomic;
use crate::lm::{LmArch, LmModel};
use crate::numerics::{ParamStore, Tensor};
use crate::seq2seq::{TmConfig, TmModel};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NMTCKPT1";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'b str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format("checkpoint", format!("metadata lacks {key:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("metadata entry {k:?} cannot be stored")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.utf8(len)?.to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::format("checkpoint", format!("unsupported dtype {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "shape overflow"))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(name, Tensor::new(shape, data)?)?;
        }
        let meta_len = r.u64()? as usize;
        let meta = r.utf8(meta_len)?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint", format!("bad metadata line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { params, metadata })
    }

    /// Atomic write.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Elementwise mean of checkpoints with identical names and shapes. The
/// result records the source epochs and the metadata of the last input.
pub fn average_checkpoints(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let last = checkpoints.last().ok_or(Error::Empty("checkpoint list"))?;
    let stores: Vec<&ParamStore> = checkpoints.iter().map(|c| &c.params).collect();
    let mut out = Checkpoint {
        params: average_stores(&stores)?,
        metadata: last.metadata.clone(),
    };
    let epochs: Vec<&str> = checkpoints.iter().filter_map(|c| c.get("epoch")).collect();
    out.metadata.insert("source_epochs".into(), epochs.join(","));
    Ok(out)
}

pub(crate) fn average_stores(stores: &[&ParamStore]) -> Result<ParamStore> {
    let first = stores.first().ok_or(Error::Empty("checkpoint list"))?;
    let mut out = ParamStore::new();
    let k = stores.len() as f64;
    for (name, t) in first.iter() {
        let mut sum = vec![0.0; t.len()];
        for s in stores {
            let other = s
                .by_name(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {name:?}")))?;
            if other.shape() != t.shape() {
                return Err(Error::shape("average_checkpoints", format!("{name}: {:?} vs {:?}", t.shape(), other.shape())));
            }
            sum.iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
        }
        sum.iter_mut().for_each(|v| *v /= k);
        out.add(name, Tensor::new(t.shape().to_vec(), sum)?)?;
    }
    if stores.iter().any(|s| s.len() != first.len()) {
        return Err(Error::invalid("checkpoints hold different parameter sets"));
    }
    Ok(out)
}

/// Overwrites every parameter of `dst` with the same-named one from `src`.
pub fn copy_params(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::invalid(format!(
            "expected {} parameters, checkpoint has {}",
            dst.len(),
            src.len()
        )));
    }
    for (name, t) in src.iter() {
        dst.set(name, t.clone())?;
    }
    Ok(())
}

pub fn lm_checkpoint(lm: &LmModel) -> Checkpoint {
    Checkpoint::new(lm.params().clone())
        .with("kind", "lm")
        .with("arch", lm.arch())
        .with("vocab", lm.vocab_size())
}

pub fn load_lm(ck: &Checkpoint) -> Result<LmModel> {
    if ck.require("kind")? != "lm" {
        return Err(Error::format("checkpoint", "not a language model"));
    }
    let arch: LmArch = ck.require("arch")?.parse()?;
    let vocab = ck
        .require("vocab")?
        .parse()
        .map_err(|_| Error::format("checkpoint", "bad vocab"))?;
    let mut lm = LmModel::new(arch, vocab, 0)?;
    copy_params(lm.params_mut(), &ck.params)?;
    Ok(lm)
}

pub fn tm_checkpoint(tm: &TmModel) -> Checkpoint {
    Checkpoint::new(tm.params().clone())
        .with("kind", "tm")
        .with("config", tm.config())
}

pub fn load_tm(ck: &Checkpoint) -> Result<TmModel> {
    if ck.require("kind")? != "tm" {
        return Err(Error::format("checkpoint", "not a translation model"));
    }
    let config: TmConfig = ck.require("config")?.parse()?;
    let mut tm = TmModel::new(config, 0)?;
    copy_params(tm.params_mut(), &ck.params)?;
    Ok(tm)
}
