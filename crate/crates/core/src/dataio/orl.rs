//! ORL face database loader (40 subjects × 10 PGM images of 112×92).

use std::path::{Path, PathBuf};

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kernels::{l2_normalize_rows, DenseMatrix, NORM_EPS};

pub const SUBJECTS: usize = 40;
pub const IMAGES_PER_SUBJECT: usize = 10;
pub const HEIGHT: usize = 112;
pub const WIDTH: usize = 92;

/// Loads `dir/s{1..40}/{1..10}.pgm`. Pixels are scaled to `[0, 1]` by the
/// file's maxval and every image vector is then l2-normalized. Labels are
/// zero-based subject indices.
pub fn load_orl(dir: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let dir = dir.as_ref();
    let d = HEIGHT * WIDTH;
    let n = SUBJECTS * IMAGES_PER_SUBJECT;
    let mut data = Vec::with_capacity(n * d);
    let mut ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for s in 1..=SUBJECTS {
        for i in 1..=IMAGES_PER_SUBJECT {
            let path = dir.join(format!("s{s}")).join(format!("{i}.pgm"));
            let bytes = std::fs::read(&path).map_err(|e| load_err(&path, e.to_string()))?;
            let img = parse_pgm(&bytes).map_err(|msg| load_err(&path, msg))?;
            if (img.width, img.height) != (WIDTH, HEIGHT) {
                return Err(load_err(
                    &path,
                    format!("image is {}x{}, expected {WIDTH}x{HEIGHT}", img.width, img.height),
                ));
            }
            let scale = 1.0 / img.maxval as f32;
            data.extend(img.pixels.iter().map(|&p| p as f32 * scale));
            ids.push(format!("s{s}/{i}"));
            labels.push(s as i32 - 1);
        }
    }
    let m = l2_normalize_rows(&DenseMatrix::from_vec(n, d, data)?, NORM_EPS);
    FeatureMatrix::new(m, ids, Some(labels))
}

fn load_err(path: &Path, msg: String) -> Error {
    Error::Load {
        path: PathBuf::from(path),
        msg,
    }
}

#[derive(Debug)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

/// Parses binary (`P5`) and ASCII (`P2`) greymaps.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |t: String| t.parse::<usize>().map_err(|_| format!("bad header field {t:?}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    let count = width * height;
    let pixels = match magic.as_str() {
        "P5" => {
            let start = pos + 1;
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            if bytes.len() < start + need {
                return Err(format!(
                    "pixel data truncated: {} of {need} bytes",
                    bytes.len().saturating_sub(start)
                ));
            }
            let raw = &bytes[start..start + need];
            if wide {
                raw.chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]))
                    .collect()
            } else {
                raw.iter().map(|&b| b as u16).collect()
            }
        }
        "P2" => {
            let mut px = Vec::with_capacity(count);
            for _ in 0..count {
                px.push(num(token()?)? as u16);
            }
            px
        }
        other => return Err(format!("unsupported PGM magic {other:?}")),
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}
