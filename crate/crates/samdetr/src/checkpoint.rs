//! Checkpoint files: a fixed magic, then every named parameter tensor in
//! registration order at 32-bit precision, all little-endian.
//!
//! Layout: `SAMD0001`, u32 tensor count, then per tensor a u16 name length,
//! the UTF-8 name, a u8 rank, u32 dims, and the row-major f32 values.

use std::collections::BTreeSet;
use std::path::Path;

use samdetr_core::nn::ParamStore;
use samdetr_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SAMD0001";

/// One tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes every parameter in registration order.
pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::format("checkpoint", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for entry in store.iter() {
        let name = entry.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| {
            Error::format("checkpoint", format!("name too long: {}", entry.name))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = entry.tensor.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::format("checkpoint", "rank exceeds 255"))?;
        out.push(rank);
        for &dim in shape {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::format("checkpoint", "dimension exceeds u32"))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in entry.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::format("checkpoint", format!("unexpected end of file at byte {}", self.at))
        })?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes, rejecting bad magic, truncation, and duplicate
/// tensor names.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format("checkpoint", format!("duplicate tensor name {name}")));
        }
        let rank = c.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if c.at != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes after the last tensor", bytes.len() - c.at),
        ));
    }
    Ok(tensors)
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint into an already-registered store. The name sets must
/// match exactly; mismatches are reported with the missing and extra names.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = load(path)?;
    let stored: BTreeSet<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    let wanted: BTreeSet<&str> = store.iter().map(|e| e.name.as_str()).collect();
    if stored != wanted {
        let missing: Vec<&str> = wanted.difference(&stored).copied().collect();
        let extra: Vec<&str> = stored.difference(&wanted).copied().collect();
        return Err(Error::format(
            "checkpoint",
            format!(
                "architecture mismatch; missing [{}], extra [{}]",
                missing.join(", "),
                extra.join(", ")
            ),
        ));
    }
    for t in tensors {
        let id = store.find(&t.name).expect("name set was just verified");
        if store.get(id).shape() != t.shape.as_slice() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "shape mismatch for {}: stored {:?}, expected {:?}",
                    t.name,
                    t.shape,
                    store.get(id).shape()
                ),
            ));
        }
        let data: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
        *store.get_mut(id) = Tensor::new(&t.shape, data)?;
    }
    Ok(())
}
