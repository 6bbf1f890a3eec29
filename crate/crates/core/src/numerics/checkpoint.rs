//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "FMILTNSR"
//! version   u32      FORMAT_VERSION
//! count     u32      number of records
//! record*   name_len u32, name (utf-8), kind u8 (0 trainable, 1 buffer,
//!           2 data), frozen u8, ndim u32, dims u64 * ndim,
//!           values f64 * prod(dims)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::{EntryKind, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FMILTNSR";

#[derive(Clone, Copy)]
enum Kind {
    Trainable = 0,
    Buffer = 1,
    Data = 2,
}

struct Record {
    name: String,
    kind: u8,
    frozen: bool,
    tensor: Tensor,
}

fn encode(records: &[(&str, Kind, bool, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, kind, frozen, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(*kind as u8);
        out.push(u8::from(*frozen));
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name =
            String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non utf-8 tensor name".into()))?;
        let kind = c.u8()?;
        let frozen = c.u8()? != 0;
        let ndim = c.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = c.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        records.push(Record {
            name,
            kind,
            frozen,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(records)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Write arbitrary named tensors (cached features and the like).
pub fn write_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let recs: Vec<_> = tensors
        .iter()
        .map(|(n, t)| (n.as_str(), Kind::Data, false, t))
        .collect();
    write_bytes(path, &encode(&recs))
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    Ok(decode(&read_bytes(path)?)?
        .into_iter()
        .map(|r| (r.name, r.tensor))
        .collect())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let recs: Vec<_> = store
        .raw_entries()
        .iter()
        .map(|e| {
            let kind = match e.kind {
                EntryKind::Trainable => Kind::Trainable,
                EntryKind::Buffer => Kind::Buffer,
            };
            (e.name.as_str(), kind, e.frozen, &e.value)
        })
        .collect();
    write_bytes(path, &encode(&recs))
}

/// Load values into an existing store; every store entry must be present
/// with a matching shape.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let recs = decode(&read_bytes(path)?)?;
    let mut by_name: std::collections::HashMap<String, Record> =
        recs.into_iter().map(|r| (r.name.clone(), r)).collect();
    let names: Vec<(String, _)> = store.entries().map(|(id, e)| (e.name.clone(), id)).collect();
    for (name, id) in names {
        let rec = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
        if rec.kind == Kind::Data as u8 {
            return Err(Error::Checkpoint(format!("{name} is a data record")));
        }
        if rec.tensor.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored {:?}, model {:?}",
                rec.tensor.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = rec.tensor;
        if rec.frozen {
            store.set_frozen(&name, true);
        }
    }
    Ok(())
}
