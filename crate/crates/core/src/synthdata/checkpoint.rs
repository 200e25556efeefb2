//! Binary checkpoint container.
//!
//! ```text
//! b"LOKI" | u32 LE version | u64 LE header length | JSON header | payload
//! ```
//!
//! The header lists every array with its byte range in the payload and carries a
//! CRC-32 of the payload. Arrays are little-endian `f32` or `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_file, write_file};

pub const MAGIC: &[u8; 4] = b"LOKI";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    pub payload_bytes: u64,
    pub payload_crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(Error::Checkpoint(format!("array {} has shape {:?} but {} values", a.name, a.shape, a.data.len())));
            }
            let offset = payload.len() as u64;
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            }
            entries.push(ArrayEntry {
                name: a.name.clone(),
                group: a.group.clone(),
                shape: a.shape.clone(),
                dtype: a.data.dtype(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let header = CheckpointHeader {
            meta: self.meta.clone(),
            arrays: entries,
            payload_bytes: payload.len() as u64,
            payload_crc32: crc32fast::hash(&payload),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 {
            return Err(bad(format!("file is {} bytes, too short for a header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad(format!("truncated header: need {hlen} bytes, have {}", body.len())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &body[hlen..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(bad(format!("payload is {} bytes, header says {}", payload.len(), header.payload_bytes)));
        }
        let crc = crc32fast::hash(payload);
        if crc != header.payload_crc32 {
            return Err(bad(format!("payload checksum {crc:08x} does not match {:08x}", header.payload_crc32)));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let (start, len) = (e.offset as usize, e.nbytes as usize);
            if len != n * e.dtype.size() || start.checked_add(len).map_or(true, |end| end > payload.len()) {
                return Err(bad(format!("array {} has an invalid byte range", e.name)));
            }
            let raw = &payload[start..start + len];
            let data = match e.dtype {
                DType::F32 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F64 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            arrays.push(NamedArray { name: e.name, group: e.group, shape: e.shape, data });
        }
        Ok(Self { meta: header.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
