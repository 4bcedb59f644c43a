//! Feature stores, binary artifact formats and dataset loaders.

mod binio;
pub mod ckpt;
pub mod csrg;
pub mod fmat;
pub mod orl;
pub mod toy;

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;

pub use ckpt::{read_ckpt, write_ckpt, Checkpoint, OptimizerBlob};
pub use csrg::{read_csrg, write_csrg, GraphFile};
pub use fmat::{read_fmat, write_fmat};
pub use orl::load_orl;
pub use toy::{generate_toy, letter_skeletons, ToyLetter};

/// `n × d` feature store with per-row identifiers and optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DenseMatrix<f32>,
    ids: Vec<String>,
    labels: Option<Vec<i32>>,
}

impl FeatureMatrix {
    pub fn new(data: DenseMatrix<f32>, ids: Vec<String>, labels: Option<Vec<i32>>) -> Result<Self> {
        if ids.len() != data.rows() {
            return Err(Error::shape(format!(
                "{} ids for {} rows",
                ids.len(),
                data.rows()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != data.rows() {
                return Err(Error::shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    data.rows()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate instance id {dup:?}")));
        }
        Ok(FeatureMatrix { data, ids, labels })
    }

    /// Rows named by their index, `"0"`, `"1"`, ...
    pub fn with_index_ids(data: DenseMatrix<f32>, labels: Option<Vec<i32>>) -> Result<Self> {
        let ids = (0..data.rows()).map(|i| i.to_string()).collect();
        Self::new(data, ids, labels)
    }

    pub fn n(&self) -> usize {
        self.data.rows()
    }

    pub fn d(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &DenseMatrix<f32> {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.data.row(i)
    }

    pub fn into_parts(self) -> (DenseMatrix<f32>, Vec<String>, Option<Vec<i32>>) {
        (self.data, self.ids, self.labels)
    }

    /// Subset of rows, keeping ids and labels aligned.
    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data.select_rows(rows),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for r in 0..self.n() {
            if self.row(r).iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite feature in row {r} ({})",
                    self.ids[r]
                )));
            }
        }
        Ok(())
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

/// Queries, either as rows of a feature matrix or as standalone vectors.
#[derive(Debug, Clone)]
pub enum QuerySet {
    Indices(Vec<usize>),
    Standalone(FeatureMatrix),
}

impl QuerySet {
    pub fn indices(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::param("empty query set"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::param(format!("query index {bad} out of range for {n} rows")));
        }
        Ok(QuerySet::Indices(indices))
    }

    pub fn standalone(queries: FeatureMatrix) -> Result<Self> {
        if queries.n() == 0 {
            return Err(Error::param("empty query set"));
        }
        Ok(QuerySet::Standalone(queries))
    }

    pub fn len(&self) -> usize {
        match self {
            QuerySet::Indices(v) => v.len(),
            QuerySet::Standalone(f) => f.n(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SHA-256 of a byte buffer.
pub fn content_hash(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
