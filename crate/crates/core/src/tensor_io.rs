//! `GDTR1` named-tensor container.
//!
//! Layout, all integers little-endian:
//! `"GDTR1"`, `u32` record count, then per record `u16` name length, UTF-8
//! name, `u8` dtype (0 = f32, 1 = f64), `u8` rank, `rank` x `u32` dims, payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GDTR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// One stored tensor. Values are held as f64; `dtype` controls the on-disk width.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

impl Record {
    pub fn f64(name: impl Into<String>, tensor: Tensor) -> Self {
        Record { name: name.into(), dtype: DType::F64, tensor }
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| Error::invalid("too many records"))?.to_le_bytes());
    for r in records {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::invalid(format!("duplicate tensor name {:?}", r.name)));
        }
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {}", r.name)))?;
        let rank = u8::try_from(r.tensor.shape.len()).map_err(|_| Error::invalid(format!("rank too large for {}", r.name)))?;
        if r.tensor.shape.iter().product::<usize>() != r.tensor.data.len() {
            return Err(Error::shape(format!("{}: shape {:?} vs {} values", r.name, r.tensor.shape, r.tensor.data.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.dtype as u8);
        out.push(rank);
        for &d in &r.tensor.shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension too large in {}", r.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match r.dtype {
            DType::F32 => r.tensor.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => r.tensor.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated container: needed {n} bytes for {what} at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic: not a GDTR1 container".into()));
    }
    let mut c = Cursor { bytes, pos: MAGIC.len() };
    let count = c.u32("record count")?;
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let dtype = match c.u8("dtype")? {
            0 => DType::F32,
            1 => DType::F64,
            d => return Err(Error::Format(format!("{name}: unknown dtype {d}"))),
        };
        let rank = c.u8("rank")? as usize;
        let shape = (0..rank).map(|_| c.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format(format!("{name}: shape overflow")))?;
        let payload = c.take(n.checked_mul(dtype.size()).ok_or_else(|| Error::Format("payload overflow".into()))?, &name)?;
        let data = match dtype {
            DType::F32 => payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            DType::F64 => payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        out.push(Record { name, dtype, tensor: Tensor { shape, data } });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last record", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn write(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = encode(records)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_map(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    Ok(read(path)?.into_iter().map(|r| (r.name, r.tensor)).collect())
}
