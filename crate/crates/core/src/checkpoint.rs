//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ARC1" | version u32 | count u32
//! per tensor: name_len u16 | name (UTF-8) | frozen u8 | rank u32 | dims u64 * rank | values f64 * prod(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"ARC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("parameter name `{}` is too long", p.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(p.frozen()));
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad frozen marker {b} for `{name}`"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for `{name}`")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry {
            name,
            frozen,
            shape,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

/// Restores every parameter of `store` from `entries`.
///
/// The checkpoint must hold exactly the store's parameters with the same
/// shapes and frozen flags, and its frozen values must match bit-for-bit.
pub fn restore(store: &mut ParamStore, entries: &[Entry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors but the model has {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .lookup(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", e.name)))?;
        let p = store.get(id);
        if p.tensor.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                e.name,
                e.shape,
                p.tensor.shape()
            )));
        }
        if p.frozen() != e.frozen {
            return Err(Error::Checkpoint(format!("frozen flag mismatch for `{}`", e.name)));
        }
        if e.frozen && p.tensor.data().iter().zip(&e.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Checkpoint(format!(
                "frozen tensor `{}` differs from the model's base weights",
                e.name
            )));
        }
    }
    for e in entries {
        let id = store.lookup(&e.name).expect("checked above");
        store.set_values(id, &e.data)?;
    }
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, &decode(&bytes)?)
}
