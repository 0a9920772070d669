//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, one version byte, then records until end of file.
//! Each record is `name_len: u32`, `name` (UTF-8), `rank: u32`,
//! `rank × extent: u32`, and the row-major payload as `f32`. All integers
//! and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GEODEPTH";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 9 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    if bytes[8] != VERSION {
        return Err(Error::Version(format!(
            "{}: checkpoint version {} (expected {VERSION})",
            path.display(),
            bytes[8]
        )));
    }
    let mut r = Reader { buf: bytes, pos: 9 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let truncated = || bad("truncated record");
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r
            .take(numel.checked_mul(4).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(Record { name, shape, data });
    }
    Ok(records)
}

pub fn records_of<T: Scalar>(store: &ParamStore<T>) -> Vec<Record> {
    store
        .iter()
        .map(|(_, p)| Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
        .collect()
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(&records_of(store))).map_err(|e| Error::io(path, e))
}

/// Loads values into an already-built store. Every parameter of the store
/// must be present with an identical shape, and the file may not contain
/// names the store does not know.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let records = decode(&bytes, path)?;
    apply(store, &records, path)
}

pub fn apply<T: Scalar>(store: &mut ParamStore<T>, records: &[Record], path: &Path) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Version(format!(
            "{}: checkpoint has {} tensors, model expects {}",
            path.display(),
            records.len(),
            store.len()
        )));
    }
    for r in records {
        let id = store.id(&r.name).ok_or_else(|| {
            Error::Version(format!("{}: unknown tensor {}", path.display(), r.name))
        })?;
        let want = store.value(id).shape().to_vec();
        if want != r.shape {
            return Err(Error::Version(format!(
                "{}: tensor {} has shape {:?}, model expects {:?}",
                path.display(),
                r.name,
                r.shape,
                want
            )));
        }
        *store.value_mut(id) = Tensor::new(
            &r.shape,
            r.data.iter().map(|&v| T::of(v as f64)).collect(),
        )?;
    }
    Ok(())
}
