//! Versioned binary checkpoints of named float64 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "MSLABCK\0"
//! version  u32
//! meta_len u32, then meta_len bytes of UTF-8 metadata (the run config)
//! count    u32
//! count x { name_len u32, name bytes, rank u32, rank x u64 dims,
//!           prod(dims) x f64 }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MSLABCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Checkpoint {
            metadata: metadata.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Adds or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        self.require(name)?
            .item()
            .map_err(|_| Error::Checkpoint(format!("entry `{name}` is not a scalar")))
    }

    /// Stores every tensor of `params` as `prefix` + name.
    pub fn store_params(&mut self, prefix: &str, params: &ParamSet) {
        for (_, name, t) in params.iter() {
            self.insert(format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape"));
        }
    }

    /// Overwrites every tensor of `params` with the entry `prefix` + name.
    /// Missing entries and shape differences are errors.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let key = format!("{prefix}{name}");
            let stored = self.require(&key)?;
            let target = params.by_name(&name).expect("listed above");
            if stored.shape() != target.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry `{key}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    target.shape()
                )));
            }
            params.set_data(&name, stored.data())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.metadata);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let metadata = r.string()?;
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new(metadata);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if ckpt.get(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
            }
            ckpt.entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
