//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! | field            | type                          |
//! |------------------|-------------------------------|
//! | magic            | `b"MOAT"`                     |
//! | version          | u32 (= 1)                     |
//! | tensor count     | u64                           |
//! | per tensor       | u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u8 rank, u64 dims[rank], raw data |
//! | checksum         | u64 FNV-1a of every preceding byte |
//!
//! Tensors are written in [`path_order`](moat_core::nn::path_order), so the
//! same parameters always produce the same bytes. Running batch-norm
//! statistics are stored alongside trainable tensors.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use moat_core::nn::ParamStore;
use moat_core::{DType, Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOAT";
pub const VERSION: u32 = 1;

/// Suffix of tensors that a downstream model may leave out on purpose.
pub const DROPPABLE_SUFFIX: &str = ".rel_bias";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64 (exact for both dtypes).
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Checkpoint tensors intentionally left out (relative bias tables).
    pub dropped: Vec<String>,
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Serializes every tensor of `store` in checkpoint order at its own dtype.
pub fn encode<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let ids = store.ordered_ids();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        let e = store.entry(id);
        let name = e.spec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE as u8);
        out.push(e.value.rank() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            match T::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
            }
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and verifies a checkpoint image.
pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
        return Err(Error::Format(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u64("tensor count")?;
    let mut records: Vec<Record> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or(Error::UnknownDtype(tag))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("`{name}`: dims overflow")))?;
        let raw = r.take(
            numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("`{name}`: size overflow")))?,
            "tensor data",
        )?;
        let data = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        records.push(Record { name, dtype, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(records)
}

/// Loads a checkpoint image into `store`. Every tensor is checked before
/// the first write, so on error the store is untouched.
pub fn load_into<T: Real>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<LoadReport> {
    let records = decode(bytes)?;
    let mut staged = Vec::with_capacity(store.len());
    let mut dropped = Vec::new();
    let mut found = vec![false; store.len()];
    for rec in records {
        let Some(id) = store.id(&rec.name) else {
            if rec.name.ends_with(DROPPABLE_SUFFIX) {
                dropped.push(rec.name);
                continue;
            }
            return Err(Error::UnexpectedTensor(rec.name));
        };
        let expected = &store.entry(id).spec.shape;
        if *expected != rec.shape {
            return Err(Error::ShapeMismatch {
                name: rec.name,
                expected: expected.clone(),
                found: rec.shape,
            });
        }
        found[id.0] = true;
        let t = Tensor::new(&rec.shape, rec.data.iter().map(|&v| T::of(v)).collect())?;
        staged.push((rec.name, t));
    }
    if let Some(i) = found.iter().position(|f| !f) {
        return Err(Error::MissingTensor(store.entries()[i].spec.name.clone()));
    }
    let loaded = staged.len();
    for (name, t) in staged {
        store.set_value(&name, t)?;
    }
    Ok(LoadReport { loaded, dropped })
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<LoadReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(store, &bytes)
}
