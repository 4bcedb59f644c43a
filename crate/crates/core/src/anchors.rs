//! K-means anchors and simplex-constrained sparse codes over them.

use rand::Rng;
use rayon::prelude::*;

use crate::dataio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kernels::{dot, DenseMatrix, SparseMatrix};
use crate::rng;

/// Projected-gradient iterations per code.
pub const CODE_ITERS: usize = 200;

pub const DEFAULT_ANCHORS: usize = 100;
pub const DEFAULT_SUPPORT: usize = 5;

/// Anchor features `U` (`B × d`) and per-instance codes `Z` (`N × B`).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorModel {
    pub anchors: DenseMatrix<f32>,
    pub codes: SparseMatrix<f32>,
    pub support: usize,
}

impl AnchorModel {
    pub fn fit(x: &FeatureMatrix, b: usize, c: usize, seed: u64, max_iters: usize) -> Result<Self> {
        let anchors = kmeans(x, b, seed, max_iters)?;
        let codes = encode_all(x, &anchors, c)?;
        Ok(AnchorModel {
            anchors,
            codes,
            support: c,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.rows()
    }
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest_center(p: &[f32], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// to the point farthest from its current center.
pub fn kmeans(x: &FeatureMatrix, b: usize, seed: u64, max_iters: usize) -> Result<DenseMatrix<f32>> {
    let n = x.n();
    if b == 0 || b > n {
        return Err(Error::param(format!("anchor count must satisfy 1 <= B <= n, got B={b}, n={n}")));
    }
    x.check_finite()?;
    let d = x.d();
    let mut rng = rng::seeded(seed);
    let to_f64 = |i: usize| x.row(i).iter().map(|&v| v as f64).collect::<Vec<f64>>();

    // k-means++ seeding
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![to_f64(first)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < b {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if u < w {
                        pick = Some(i);
                        break;
                    }
                    u -= w;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining point duplicates a center
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = to_f64(pick);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, dd) = nearest_center(x.row(i), &centers);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
            dist[i] = dd;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; d]; b];
        let mut counts = vec![0usize; b];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(x.row(i)) {
                *s += v as f64;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..b {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s * inv).collect();
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(bi) if dist[bi] >= dist[i] => Some(bi),
                        _ => Some(i),
                    })
                    .expect("b <= n leaves a free point");
                taken[far] = true;
                dist[far] = 0.0;
                centers[c] = to_f64(far);
            }
        }
    }
    let data = centers.into_iter().flatten().map(|v| v as f32).collect();
    DenseMatrix::from_vec(b, d, data)
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Minimizes `zᵀGz − 2bᵀz` over the simplex from `z0` by projected
/// gradient with step `1/L`; returns the final iterate and the objective
/// value before each step and after the last one.
fn simplex_least_squares(gram: &[Vec<f64>], lin: &[f64], z0: Vec<f64>, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let c = lin.len();
    let objective = |z: &[f64]| -> f64 {
        let mut q = 0.0;
        for a in 0..c {
            q += z[a] * (dot(&gram[a], z) - 2.0 * lin[a]);
        }
        q
    };
    // Gershgorin bound on λ_max(G); the gradient 2(Gz − b) is 2λ-Lipschitz
    let lipschitz = 2.0
        * gram
            .iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
    let mut z = z0;
    let mut trace = Vec::with_capacity(iters + 1);
    trace.push(objective(&z));
    if lipschitz <= 0.0 {
        return (z, trace);
    }
    let step = 1.0 / lipschitz;
    for _ in 0..iters {
        let moved: Vec<f64> = (0..c)
            .map(|a| z[a] - step * 2.0 * (dot(&gram[a], &z) - lin[a]))
            .collect();
        z = project_simplex(&moved);
        trace.push(objective(&z));
    }
    (z, trace)
}

/// Sparse code of `x` on its `c` nearest anchors (ties by lower index):
/// `min ‖x − Uz‖²` s.t. `z ≥ 0`, `Σz = 1`. Entries are `(anchor, weight)`,
/// ascending by anchor, zeros dropped.
pub fn sparse_code(x: &[f32], anchors: &DenseMatrix<f32>, c: usize) -> Result<Vec<(usize, f32)>> {
    sparse_code_traced(x, anchors, c).map(|(z, _)| z)
}

pub(crate) fn sparse_code_traced(
    x: &[f32],
    anchors: &DenseMatrix<f32>,
    c: usize,
) -> Result<(Vec<(usize, f32)>, Vec<f64>)> {
    let b = anchors.rows();
    if c == 0 || c > b {
        return Err(Error::param(format!("support size must satisfy 1 <= c <= B, got c={c}, B={b}")));
    }
    if x.len() != anchors.cols() {
        return Err(Error::shape(format!(
            "vector of length {} against anchors of width {}",
            x.len(),
            anchors.cols()
        )));
    }
    let mut by_dist: Vec<(f64, usize)> = (0..b)
        .map(|a| {
            let row: Vec<f64> = anchors.row(a).iter().map(|&v| v as f64).collect();
            (sq_dist(x, &row), a)
        })
        .collect();
    by_dist.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
    let mut support: Vec<usize> = by_dist[..c].iter().map(|p| p.1).collect();
    let nearest = support[0];
    support.sort_unstable();

    let gram: Vec<Vec<f64>> = support
        .iter()
        .map(|&a| support.iter().map(|&bb| dot(anchors.row(a), anchors.row(bb))).collect())
        .collect();
    let lin: Vec<f64> = support.iter().map(|&a| dot(anchors.row(a), x)).collect();
    // start from the one-hot code at the nearest anchor
    let z0: Vec<f64> = support.iter().map(|&a| if a == nearest { 1.0 } else { 0.0 }).collect();
    let (z, trace) = simplex_least_squares(&gram, &lin, z0, CODE_ITERS);
    let code = support
        .into_iter()
        .zip(z)
        .filter(|&(_, w)| w > 0.0)
        .map(|(a, w)| (a, w as f32))
        .collect();
    Ok((code, trace))
}

/// Codes every row of `x`; rows are independent and coded in parallel.
pub fn encode_all(x: &FeatureMatrix, anchors: &DenseMatrix<f32>, c: usize) -> Result<SparseMatrix<f32>> {
    let rows: Result<Vec<Vec<(usize, f32)>>> = (0..x.n())
        .into_par_iter()
        .map(|i| sparse_code(x.row(i), anchors, c))
        .collect();
    SparseMatrix::from_row_lists(anchors.rows(), rows?)
}

/// `[X | Z]`: appends the densified code block to every feature row.
pub fn augment_features(x: &FeatureMatrix, z: &SparseMatrix<f32>) -> Result<FeatureMatrix> {
    if z.rows() != x.n() {
        return Err(Error::shape(format!("{} code rows for {} feature rows", z.rows(), x.n())));
    }
    let joined = DenseMatrix::hconcat(&[x.data(), &z.to_dense()])?;
    FeatureMatrix::new(joined, x.ids().to_vec(), x.labels().map(<[i32]>::to_vec))
}

/// `‖x − Uz‖₂` for a sparse code.
pub fn reconstruction_error(x: &[f32], anchors: &DenseMatrix<f32>, code: &[(usize, f32)]) -> f64 {
    let mut recon = vec![0.0f64; x.len()];
    for &(a, w) in code {
        for (r, &u) in recon.iter_mut().zip(anchors.row(a)) {
            *r += w as f64 * u as f64;
        }
    }
    sq_dist(x, &recon).sqrt()
}
