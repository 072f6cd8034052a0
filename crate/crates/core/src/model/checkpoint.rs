//! The `KTDA` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KTDA" | version: u32 | record*
//! record = name_len: u32 | name bytes | dtype: u8 | rank: u32 | dims: u32[rank] | payload
//! ```
//!
//! Records run until end of file. Payload element width follows the dtype
//! tag (see [`DType`]).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar};

pub const MAGIC: [u8; 4] = *b"KTDA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_scalars<T: Scalar>(values: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => Payload::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            _ => Payload::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }

    /// Float payload converted to `T`. Converting between widths is allowed;
    /// integer payloads are rejected.
    pub fn to_scalars<T: Scalar>(&self) -> Option<Vec<T>> {
        match self {
            Payload::F32(v) if T::DTYPE == DType::F32 => Some(v.iter().map(|&x| T::from_f32(x).unwrap()).collect()),
            Payload::F32(v) => Some(v.iter().map(|&x| T::c(x as f64)).collect()),
            Payload::F64(v) => Some(v.iter().map(|&x| T::from_f64(x).unwrap()).collect()),
            Payload::U64(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn new(name: impl Into<String>, dims: &[usize], payload: Payload) -> Result<Self> {
        let name = name.into();
        if dims.iter().product::<usize>() != payload.len() {
            return Err(Error::Malformed(format!(
                "record `{name}`: dims {dims:?} do not match {} values",
                payload.len()
            )));
        }
        Ok(Self {
            name,
            dims: dims.to_vec(),
            payload,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.payload.dtype() as u8);
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &r.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let mut records = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Malformed("record name is not UTF-8".into()))?;
            let tag = cur.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown dtype tag {tag}")))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = cur.take(n * dtype.size())?;
            let payload = match dtype {
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
                DType::U64 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            records.push(Record { name, dims, payload });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
