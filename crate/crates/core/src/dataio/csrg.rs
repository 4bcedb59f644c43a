//! `.csrg` sparse matrix files.
//!
//! Layout (little-endian): `"CSRG"`, `u32` version, `u64` rows, `u64` nnz,
//! (rows+1) `u64` row pointers, nnz `u64` column indices, nnz `f32` values.
//! An optional trailer follows: `u64` cols and a `u32`-length-prefixed
//! UTF-8 metadata string. Files without the trailer are square with empty
//! metadata.

use std::path::Path;

use super::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::kernels::SparseMatrix;

pub const MAGIC: &[u8; 4] = b"CSRG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphFile {
    pub matrix: SparseMatrix<f32>,
    /// `key=value` pairs separated by `;`, e.g. `k=15;metric=inv_euclidean`.
    pub meta: String,
}

impl GraphFile {
    pub fn new(matrix: SparseMatrix<f32>, meta: impl Into<String>) -> Self {
        GraphFile {
            matrix,
            meta: meta.into(),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.split(';').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k.trim() == key).then(|| v.trim())
        })
    }
}

pub fn encode_csrg(g: &GraphFile) -> Vec<u8> {
    let m = &g.matrix;
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(m.rows() as u64);
    w.u64(m.nnz() as u64);
    w.u64s(m.indptr().iter().map(|&p| p as u64));
    w.u64s(m.indices().iter().map(|&c| c as u64));
    w.f32s(m.values());
    w.u64(m.cols() as u64);
    w.string_u32(&g.meta);
    w.into_inner()
}

pub fn decode_csrg(bytes: &[u8]) -> Result<GraphFile> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("version mismatch: found {version}, expected {VERSION}")));
    }
    let rows = r.count("row count")?;
    let nnz = r.count("nnz")?;
    let at = r.offset();
    let indptr = to_usize(r.u64_vec(rows.saturating_add(1), "row pointers")?, at)?;
    let at = r.offset();
    let indices = to_usize(r.u64_vec(nnz, "column indices")?, at)?;
    let values = r.f32_vec(nnz, "values")?;
    let (cols, meta) = if r.is_empty() {
        (rows, String::new())
    } else {
        let cols = r.count("column count")?;
        let meta = r.string_u32("metadata")?;
        if !r.is_empty() {
            return Err(Error::format(r.offset(), "trailing bytes after metadata"));
        }
        (cols, meta)
    };
    let at = r.offset();
    let matrix = SparseMatrix::new(rows, cols, indptr, indices, values)
        .map_err(|e| Error::format(at, e.to_string()))?;
    Ok(GraphFile { matrix, meta })
}

fn to_usize(v: Vec<u64>, at: u64) -> Result<Vec<usize>> {
    v.into_iter()
        .map(|x| usize::try_from(x).map_err(|_| Error::format(at, "index does not fit in memory")))
        .collect()
}

pub fn write_csrg(g: &GraphFile, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_csrg(g))?;
    Ok(())
}

pub fn read_csrg(path: impl AsRef<Path>) -> Result<GraphFile> {
    decode_csrg(&std::fs::read(path)?)
}
