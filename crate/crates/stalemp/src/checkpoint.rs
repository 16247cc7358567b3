//! Binary container for named f64 tensors, used by parameter checkpoints and
//! history-cache snapshots.
//!
//! Layout (all integers little-endian):
//! `magic [8]u8` `version u32` `count u32`, then per entry
//! `name_len u32` `name [name_len]u8 (UTF-8)` `rank u32` `dims [rank]u64`
//! `values [prod(dims)]f64`.
//! Entries are written sorted by name so equal content means equal bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Parameter;

const MAGIC: &[u8; 8] = b"STMPTNSR";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            dims,
            values,
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut sorted: Vec<&Entry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    for w in sorted.windows(2) {
        if w[0].name == w[1].name {
            return Err(corrupt(path, format!("duplicate entry name {:?}", w[0].name)));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for e in sorted {
        let numel: usize = e.dims.iter().product();
        if numel != e.values.len() {
            return Err(corrupt(
                path,
                format!("entry {:?}: dims {:?} vs {} values", e.name, e.dims, e.values.len()),
            ));
        }
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported container version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| corrupt(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(path, format!("entry {name:?}: implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u64()? as usize);
        }
        let numel: usize = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(path, format!("entry {name:?}: dims overflow")))?;
        let mut values = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = cur.f64()?;
            if !v.is_finite() {
                return Err(corrupt(path, format!("entry {name:?}: non-finite value")));
            }
            values.push(v);
        }
        entries.push(Entry { name, dims, values });
    }
    if cur.pos != bytes.len() {
        return Err(corrupt(path, "trailing bytes after final entry"));
    }
    Ok(entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes every parameter's current value under its own name.
pub fn save_params(path: &Path, params: &[&Parameter]) -> Result<()> {
    let entries: Vec<Entry> = params
        .iter()
        .map(|p| {
            Entry::new(
                p.name.clone(),
                vec![p.value.rows, p.value.cols],
                p.value.data.clone(),
            )
        })
        .collect();
    write_container(path, &entries)
}

/// Restores parameter values in place; the file must carry exactly the same
/// names and shapes as `params`.
pub fn load_params(path: &Path, params: &mut [&mut Parameter]) -> Result<()> {
    let entries = read_container(path)?;
    if entries.len() != params.len() {
        return Err(corrupt(
            path,
            format!("{} entries for {} parameters", entries.len(), params.len()),
        ));
    }
    for p in params.iter_mut() {
        let e = entries
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| corrupt(path, format!("missing parameter {:?}", p.name)))?;
        if e.dims != [p.value.rows, p.value.cols] {
            return Err(corrupt(
                path,
                format!(
                    "parameter {:?}: stored dims {:?}, expected [{}, {}]",
                    p.name, e.dims, p.value.rows, p.value.cols
                ),
            ));
        }
        p.value.data.copy_from_slice(&e.values);
    }
    Ok(())
}
