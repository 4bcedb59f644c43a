//! `.ckpt` model checkpoints.
//!
//! Layout (little-endian): `"GDNC"`, `u32` version = 1, `u32` layer count L,
//! (L+1) `u64` layer widths, then per layer the `W1` and `W2` payloads
//! (`f32`, row-major, `d_l × d_{l+1}`), a `u64`-length-prefixed UTF-8
//! `key=value` config block, and the 32-byte SHA-256 of the feature file.
//! A trailing optimizer section (`u8` flag, `u64` epoch, `u64` step, then
//! per layer the Adam moments `m1 v1 m2 v2`) makes training resumable.

use std::path::Path;

use super::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::kernels::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"GDNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlob {
    /// Number of completed epochs.
    pub epoch: u64,
    /// Adam timestep.
    pub step: u64,
    /// Per layer: first/second moments of W1, then of W2.
    pub moments: Vec<[DenseMatrix<f32>; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: Vec<usize>,
    pub layers: Vec<(DenseMatrix<f32>, DenseMatrix<f32>)>,
    pub config: Vec<(String, String)>,
    pub feature_hash: [u8; 32],
    pub optimizer: Option<OptimizerBlob>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn encode_ckpt(c: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(c.layers.len() as u32);
    w.u64s(c.dims.iter().map(|&d| d as u64));
    for (w1, w2) in &c.layers {
        w.f32s(w1.as_slice());
        w.f32s(w2.as_slice());
    }
    let block: String = c
        .config
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    w.string_u64(&block);
    w.bytes(&c.feature_hash);
    match &c.optimizer {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            w.u64(o.epoch);
            w.u64(o.step);
            for layer in &o.moments {
                for m in layer {
                    w.f32s(m.as_slice());
                }
            }
        }
    }
    w.into_inner()
}

pub fn decode_ckpt(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("version mismatch: found {version}, expected {VERSION}")));
    }
    let at = r.offset();
    let nlayers = r.u32("layer count")? as usize;
    if nlayers == 0 {
        return Err(Error::format(at, "checkpoint has no layers"));
    }
    let mut dims = Vec::with_capacity(nlayers + 1);
    for _ in 0..=nlayers {
        dims.push(r.count("layer width")?);
    }
    let read_mat = |r: &mut Reader, l: usize, what: &str| -> Result<DenseMatrix<f32>> {
        let (a, b) = (dims[l], dims[l + 1]);
        let at = r.offset();
        let len = a
            .checked_mul(b)
            .ok_or_else(|| Error::format(at, "layer size overflows"))?;
        DenseMatrix::from_vec(a, b, r.f32_vec(len, what)?)
    };
    let mut layers = Vec::with_capacity(nlayers);
    for l in 0..nlayers {
        let w1 = read_mat(&mut r, l, "W1 payload")?;
        let w2 = read_mat(&mut r, l, "W2 payload")?;
        layers.push((w1, w2));
    }
    let at = r.offset();
    let block = r.string_u64("config block")?;
    let mut config = Vec::new();
    for line in block.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(at, format!("config line without '=': {line:?}")))?;
        config.push((k.to_string(), v.to_string()));
    }
    let feature_hash: [u8; 32] = r.take(32, "feature hash")?.try_into().unwrap();
    let at = r.offset();
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let epoch = r.u64("epoch")?;
            let step = r.u64("step")?;
            let mut moments = Vec::with_capacity(nlayers);
            for l in 0..nlayers {
                moments.push([
                    read_mat(&mut r, l, "moment")?,
                    read_mat(&mut r, l, "moment")?,
                    read_mat(&mut r, l, "moment")?,
                    read_mat(&mut r, l, "moment")?,
                ]);
            }
            Some(OptimizerBlob {
                epoch,
                step,
                moments,
            })
        }
        other => return Err(Error::format(at, format!("optimizer flag must be 0 or 1, found {other}"))),
    };
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        dims,
        layers,
        config,
        feature_hash,
        optimizer,
    })
}

pub fn write_ckpt(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ckpt(c))?;
    Ok(())
}

pub fn read_ckpt(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_ckpt(&std::fs::read(path)?)
}
