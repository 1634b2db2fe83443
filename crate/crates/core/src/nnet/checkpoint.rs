//! CKP1 tensor container: magic, a JSON header, then named binary64 tensors.
//!
//! Layout (all integers u32 little-endian):
//! `"CKP1"`, header length, header UTF-8 JSON, tensor count, then per tensor
//! name length, UTF-8 name, rank, dims, and `prod(dims)` binary64 values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Mat, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

pub fn encode(header: &str, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.pos, format!("truncated {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map(str::to_owned).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

/// Decodes a checkpoint into its JSON header text and tensors.
pub fn decode(bytes: &[u8]) -> Result<(String, ParamSet)> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "missing CKP1 magic"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let header_len = r.u32("header length")?;
    let header_at = r.pos;
    let header = r.utf8(header_len, "header")?;
    serde_json::from_str::<serde_json::Value>(&header)
        .map_err(|e| Error::format(header_at, format!("header is not JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name_at = r.pos;
        let name = r.utf8(name_len, "tensor name")?;
        let rank_at = r.pos;
        let rank = r.u32("rank")?;
        let mut dims = Vec::with_capacity(rank.min(2));
        for _ in 0..rank.min(3) {
            dims.push(r.u32("dims")?);
        }
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::format(rank_at, format!("unsupported tensor rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(rank_at, "tensor shape overflows"))?;
        let values_at = r.pos;
        let raw = r.take(n, "tensor values")?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(values_at + 8 * i, format!("non-finite value in {name:?}")));
        }
        let t: Mat = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        params.insert(name.clone(), t).map_err(|_| Error::format(name_at, format!("duplicate tensor {name:?}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after tensors"));
    }
    Ok((header, params))
}

pub fn save(path: impl AsRef<Path>, header: &str, params: &ParamSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(header, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(String, ParamSet)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
