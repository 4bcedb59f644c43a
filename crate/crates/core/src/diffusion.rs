//! Classical diffusion: random walk with restart (iterative and closed
//! form) and tensor-product-graph affinity diffusion.

use crate::error::{Error, Result};
use crate::kernels::{matmul, DenseMatrix, SparseMatrix};
use crate::retrieval::{Hit, Ranking};

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_TPG_STEPS: usize = 30;
/// Residual target of the conjugate-gradient solve.
pub const CG_TOL: f64 = 1e-10;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn check_system(s: &SparseMatrix<f32>, f0: &[f64]) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::shape(format!("transition matrix is {}x{}", s.rows(), s.cols())));
    }
    if f0.len() != s.rows() {
        return Err(Error::shape(format!(
            "initial state of length {} for {} nodes",
            f0.len(),
            s.rows()
        )));
    }
    Ok(())
}

/// Binary initial state with ones on the query positions.
pub fn initial_state(n: usize, query_positions: &[usize]) -> Result<Vec<f64>> {
    let mut f0 = vec![0.0; n];
    for &q in query_positions {
        *f0.get_mut(q)
            .ok_or_else(|| Error::param(format!("query position {q} out of range for {n} nodes")))? = 1.0;
    }
    Ok(f0)
}

/// Iterates `f ← αSf + (1−α)f⁰` from `f⁰` until the max-norm change drops
/// below `tol` or `max_iters` steps were taken. Returns the state and the
/// number of steps.
pub fn random_walk_iterate(
    s: &SparseMatrix<f32>,
    f0: &[f64],
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, usize)> {
    check_alpha(alpha)?;
    check_system(s, f0)?;
    let mut f = f0.to_vec();
    for t in 1..=max_iters {
        let sf = s.mul_vec(&f);
        let next: Vec<f64> = sf
            .iter()
            .zip(f0)
            .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        let change = next
            .iter()
            .zip(&f)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        f = next;
        if change < tol {
            return Ok((f, t));
        }
    }
    Ok((f, max_iters))
}

/// Solves `(I − αS) f* = (1−α) f⁰` by conjugate gradient.
pub fn random_walk_closed(s: &SparseMatrix<f32>, f0: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    check_system(s, f0)?;
    let n = f0.len();
    let apply = |v: &[f64]| -> Vec<f64> {
        s.mul_vec(v)
            .iter()
            .zip(v)
            .map(|(&sv, &x)| x - alpha * sv)
            .collect()
    };
    let b: Vec<f64> = f0.iter().map(|v| (1.0 - alpha) * v).collect();
    let mut x = b.clone();
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let max_iters = 10 * n.max(1);
    for _ in 0..max_iters {
        if rr.sqrt() < CG_TOL {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return Err(Error::Numerical(
                "system matrix is not positive definite".into(),
            ));
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_next: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_next / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_next;
    }
    if rr.sqrt() < CG_TOL {
        return Ok(x);
    }
    Err(Error::Numerical(format!(
        "conjugate gradient did not reach residual {CG_TOL} within {max_iters} iterations (residual {:.3e})",
        rr.sqrt()
    )))
}

/// Applies `Â ← S Â Sᵀ + I` `steps` times starting from `a0`.
pub fn tpg_iterate(s: &DenseMatrix<f64>, a0: &DenseMatrix<f64>, steps: usize) -> Result<DenseMatrix<f64>> {
    let n = s.rows();
    if s.cols() != n || a0.shape() != (n, n) {
        return Err(Error::shape(format!(
            "tpg needs equal square matrices, got {:?} and {:?}",
            s.shape(),
            a0.shape()
        )));
    }
    let mut a = a0.clone();
    for _ in 0..steps {
        let sa = matmul(s, false, &a, false)?;
        a = matmul(&sa, false, s, true)?;
        for i in 0..n {
            a.set(i, i, a.get(i, i) + 1.0);
        }
    }
    Ok(a)
}

/// Database positions ordered by descending state value (ties by index),
/// with query positions removed.
pub fn rank_from_state(f: &[f64], query_positions: &[usize]) -> Ranking {
    let mut order: Vec<usize> = (0..f.len()).filter(|i| !query_positions.contains(i)).collect();
    order.sort_by(|&a, &b| f[b].total_cmp(&f[a]).then(a.cmp(&b)));
    let query_id = query_positions
        .iter()
        .map(|q| q.to_string())
        .collect::<Vec<_>>()
        .join("+");
    Ranking {
        query_id,
        hits: order
            .into_iter()
            .map(|i| Hit {
                index: i,
                id: i.to_string(),
                score: f[i],
            })
            .collect(),
    }
}
