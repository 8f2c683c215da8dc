//! `TFCK` tensor-table files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TFCK" | version: u16 | count: u32 | entry * count | crc32(count .. last entry): u32
//! entry = name_len: u32 | name (utf-8) | dtype: u8 | rank: u8 | dims: u32 * rank | raw data
//! ```
//!
//! dtype tags: 0 = f32, 1 = u8, 2 = u64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TableData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TableData {
    fn tag(&self) -> u8 {
        match self {
            TableData::F32(_) => 0,
            TableData::U8(_) => 1,
            TableData::U64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TableData::F32(v) => v.len(),
            TableData::U8(v) => v.len(),
            TableData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TableData,
}

/// Ordered collection of named tensors; order is preserved on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorTable {
    entries: Vec<TableEntry>,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: TableData) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(TableEntry {
            name: name.into(),
            dims: dims.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&TableEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            payload.extend((e.name.len() as u32).to_le_bytes());
            payload.extend(e.name.as_bytes());
            payload.push(e.data.tag());
            payload.push(e.dims.len() as u8);
            for &d in &e.dims {
                payload.extend((d as u32).to_le_bytes());
            }
            match &e.data {
                TableData::F32(v) => v.iter().for_each(|x| payload.extend(x.to_le_bytes())),
                TableData::U8(v) => payload.extend(v),
                TableData::U64(v) => v.iter().for_each(|x| payload.extend(x.to_le_bytes())),
            }
        }
        let mut out = Vec::with_capacity(payload.len() + 10);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(&payload);
        out.extend(crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 + 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing TFCK magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let payload = &bytes[6..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(Error::Format("checkpoint CRC32 mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format(format!("non-utf8 tensor name at byte {}", r.pos + 6)))?;
            let tag = r.take(1)?[0];
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = match tag {
                0 => TableData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => TableData::U8(r.take(n)?.to_vec()),
                2 => TableData::U64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Format(format!(
                        "unknown dtype tag {other} for tensor {name:?}"
                    )))
                }
            };
            entries.push(TableEntry { name, dims, data });
        }
        if r.pos != payload.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor table",
                payload.len() - r.pos
            )));
        }
        Ok(TensorTable { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated tensor table at byte {}",
                self.pos + 6
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
