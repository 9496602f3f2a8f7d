//! Flat binary container of named tensors.
//!
//! Layout (all integers little-endian):
//! `MXCK` magic, `u32` version, `u64` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u64` rows, `u64` cols and `rows·cols`
//! `f64` values in row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::SequenceModel;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(r.corrupt(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(r.array()?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(r.array()?) as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt("name is not UTF-8"))?;
        let rows = u64::from_le_bytes(r.array()?) as usize;
        let cols = u64::from_le_bytes(r.array()?) as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| r.corrupt("tensor size overflows"))?;
        if n.saturating_mul(8) > bytes.len() {
            return Err(r.corrupt("tensor larger than file"));
        }
        let data = (0..n)
            .map(|_| r.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.corrupt("unexpected end of file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn corrupt(&self, msg: &str) -> Error {
        Error::io(
            self.path,
            io::Error::new(io::ErrorKind::InvalidData, format!("{msg} at byte {}", self.pos)),
        )
    }
}

impl SequenceModel {
    /// Overwrites parameter values from checkpoint entries; names and shapes
    /// must match this model exactly.
    pub fn load_values(&mut self, entries: Vec<(String, Matrix)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, model has {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, value) in entries {
            let p = self.params.get_mut(&name)?;
            if p.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch { op: "load_values", left: p.value.shape(), right: value.shape() });
            }
            p.value = value;
        }
        Ok(())
    }
}
