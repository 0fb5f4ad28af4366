//! Feature file: `"XTFT"`, u32 version = 1, u32 rows, u32 dim, then
//! `rows × dim` little-endian f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"XTFT";
const VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn feature_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let (rows, dim) = t.require_matrix("feature matrix")?;
    let mut out = Vec::with_capacity(HEADER + t.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, feature_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn parse_feature_bytes(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(fail("not a feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != VERSION as usize {
        return Err(fail(format!("unsupported version {}", word(4))));
    }
    let (rows, dim) = (word(8), word(12));
    let expected = HEADER + rows * dim * 8;
    if bytes.len() != expected {
        return Err(fail(format!(
            "{} bytes for {rows}x{dim} (expected {expected})",
            bytes.len()
        )));
    }
    let data = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::matrix(rows, dim, data)
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_feature_bytes(&bytes, path)
}
