//! Self-describing parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "TDPCKPT\0"
//! version   u32      CHECKPOINT_VERSION
//! meta_len  u32      length of the JSON metadata object
//! meta      bytes    UTF-8 JSON object
//! count     u32      number of entries
//! entry*    u16 name_len, name bytes, u8 scalar width (4 | 8), u8 rank,
//!           rank x u64 dims, numel x width bytes of values
//! ```

use std::path::Path;

use serde_json::{Map, Value};

use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EntryData,
}

impl Entry {
    pub fn from_tensor<T: Real>(name: String, t: &Tensor<T>) -> Self {
        let data = match T::WIDTH {
            4 => EntryData::F32(t.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
            _ => EntryData::F64(t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()),
        };
        Self {
            name,
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            EntryData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            EntryData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn to_tensor_checked<T: Real>(&self, expected: &[usize]) -> Result<Tensor<T>> {
        if self.shape != expected {
            return Err(Error::Checkpoint(format!(
                "entry `{}` has shape {:?}, expected {:?}",
                self.name, self.shape, expected
            )));
        }
        self.to_tensor()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Map<String, Value>,
    pub entries: Vec<Entry>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

impl Checkpoint {
    pub fn new(entries: Vec<Entry>) -> Self {
        Self {
            metadata: Map::new(),
            entries,
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata).expect("JSON map serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let width = match e.data {
                EntryData::F32(_) => 4u8,
                EntryData::F64(_) => 8u8,
            };
            out.push(width);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                EntryData::F32(v) => f32::to_le_bytes_vec(v, &mut out),
                EntryData::F64(v) => f64::to_le_bytes_vec(v, &mut out),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = c.u32()? as usize;
        let meta_bytes = c.take(meta_len)?;
        let metadata: Map<String, Value> = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = c.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let width = c.u8()? as usize;
            if width != 4 && width != 8 {
                return Err(Error::Checkpoint(format!("entry `{name}`: bad scalar width {width}")));
            }
            let rank = c.u8()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("entry `{name}`: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = c.u64()?;
                shape.push(usize::try_from(d).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: element count overflows")))?;
            let byte_len = n
                .checked_mul(width)
                .filter(|&b| b <= c.remaining())
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}`: data truncated")))?;
            let raw = c.take(byte_len)?;
            let data = if width == 4 {
                EntryData::F32(f32::from_le_bytes_slice(raw))
            } else {
                EntryData::F64(f64::from_le_bytes_slice(raw))
            };
            debug_assert_eq!(numel(&shape), n);
            entries.push(Entry { name, shape, data });
        }
        if c.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", c.remaining())));
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Checkpoint(format!("no checkpoint at {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::decode(&bytes)
    }
}
