//! `.fmat` feature files.
//!
//! Layout (little-endian): `"FMAT"`, `u32` version = 1, `u64` n, `u64` d,
//! `u8` has_labels, n·d `f32` row-major, optional n `i32` labels, then one
//! `u32`-length-prefixed UTF-8 id per row.

use std::path::Path;

use super::binio::{Reader, Writer};
use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;
/// Bytes before the feature payload.
pub const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

pub fn encode_fmat(f: &FeatureMatrix) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(f.n() as u64);
    w.u64(f.d() as u64);
    w.u8(f.labels().is_some() as u8);
    w.f32s(f.data().as_slice());
    if let Some(labels) = f.labels() {
        w.i32s(labels);
    }
    for id in f.ids() {
        w.string_u32(id);
    }
    w.into_inner()
}

pub fn decode_fmat(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("version mismatch: found {version}, expected {VERSION}")));
    }
    let n = r.count("row count")?;
    let d = r.count("dimension")?;
    let at = r.offset();
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::format(at, format!("label flag must be 0 or 1, found {other}"))),
    };
    let len = n
        .checked_mul(d)
        .ok_or_else(|| Error::format(at, "n*d overflows"))?;
    let data = r.f32_vec(len, "feature payload")?;
    let labels = if has_labels {
        Some(r.i32_vec(n, "label block")?)
    } else {
        None
    };
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.string_u32("id table")?);
    }
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after id table"));
    }
    let matrix = DenseMatrix::from_vec(n, d, data)?;
    FeatureMatrix::new(matrix, ids, labels)
}

pub fn write_fmat(f: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_fmat(f))?;
    Ok(())
}

pub fn read_fmat(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_fmat(&std::fs::read(path)?)
}
