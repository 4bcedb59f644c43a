//! Local ranking and global order losses over sextets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{DenseMatrix, Real, SparseMatrix, NORM_EPS};
use crate::model::ModelParams;

use super::sampling::Sextet;

pub const LOSS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalLoss {
    /// `−ln(max(gap, ε))`
    #[default]
    Clamp,
    /// `−ln σ(gap)`
    Bpr,
}

impl fmt::Display for LocalLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalLoss::Clamp => "clamp",
            LocalLoss::Bpr => "bpr",
        })
    }
}

impl FromStr for LocalLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clamp" => Ok(LocalLoss::Clamp),
            "bpr" => Ok(LocalLoss::Bpr),
            _ => Err(Error::param(format!("unknown local loss {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_loss: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_loss", self.alpha_loss), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn local_loss(s_ij: f64, s_iu: f64) -> f64 {
    local_term(LocalLoss::Clamp, s_ij - s_iu).0
}

pub fn local_loss_bpr(s_ij: f64, s_iu: f64) -> f64 {
    local_term(LocalLoss::Bpr, s_ij - s_iu).0
}

/// Value and derivative with respect to the gap; the flag marks the clamp.
fn local_term(kind: LocalLoss, gap: f64) -> (f64, f64, bool) {
    match kind {
        LocalLoss::Clamp if gap > LOSS_EPS => (-gap.ln(), -1.0 / gap, false),
        LocalLoss::Clamp => (-LOSS_EPS.ln(), 0.0, true),
        LocalLoss::Bpr => {
            // ln(1 + e^{-gap}) written to avoid overflow
            let value = if gap > 0.0 {
                (-gap).exp().ln_1p()
            } else {
                -gap + gap.exp().ln_1p()
            };
            let sigma_neg = 1.0 / (1.0 + gap.exp());
            (value, -sigma_neg, false)
        }
    }
}

pub fn global_loss(a_ij: f64, a_kl: f64, s_ki: f64, s_li: f64, s_lj: f64, beta: f64) -> f64 {
    global_term(a_ij, a_kl, s_ki, s_li, s_lj, beta).0
}

/// Value, derivatives with respect to `(s_ki, s_li, s_lj)`, and whether the
/// product term was negative and clamped to zero.
fn global_term(a_ij: f64, a_kl: f64, s_ki: f64, s_li: f64, s_lj: f64, beta: f64) -> (f64, [f64; 3], bool) {
    let c = beta * a_ij * a_kl;
    let d = s_ki - s_lj;
    let x = c * s_ki * s_li * d * d;
    if x < 0.0 {
        return (0.0, [0.0; 3], true);
    }
    let outer = 1.0 / (1.0 + x);
    let grads = [
        outer * c * (s_li * d * d + 2.0 * s_ki * s_li * d),
        outer * c * s_ki * d * d,
        outer * c * s_ki * s_li * (-2.0 * d),
    ];
    (x.ln_1p(), grads, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean sextet loss plus the weight penalty.
    pub loss: f64,
    pub penalty: f64,
    /// Local terms that hit the `ε` clamp.
    pub clamped_local: usize,
    /// Global terms whose product went negative.
    pub clamped_global: usize,
}

fn norms<T: Real>(h: &DenseMatrix<T>, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| crate::kernels::norm(h.row(r))).collect()
}

/// Cosine of rows `a`, `b` and, when `grad` is set, accumulate
/// `coef · ∂cos/∂h` into it.
struct Cosines<'a, T> {
    h: &'a DenseMatrix<T>,
}

impl<T: Real> Cosines<'_, T> {
    fn value(&self, a: usize, b: usize, na: f64, nb: f64) -> f64 {
        if na < NORM_EPS || nb < NORM_EPS {
            return 0.0;
        }
        crate::kernels::dot(self.h.row(a), self.h.row(b)) / (na * nb)
    }

    fn accumulate(&self, grad: &mut DenseMatrix<T>, a: usize, b: usize, na: f64, nb: f64, coef: f64) {
        if coef == 0.0 || na < NORM_EPS || nb < NORM_EPS {
            return;
        }
        let s = self.value(a, b, na, nb);
        let inv = 1.0 / (na * nb);
        let (ha, hb) = (self.h.row(a).to_vec(), self.h.row(b).to_vec());
        let (sa, sb) = (s / (na * na), s / (nb * nb));
        {
            let ga = grad.row_mut(a);
            for ((g, &x), &y) in ga.iter_mut().zip(&ha).zip(&hb) {
                *g = *g + T::from_f64(coef * (y.as_f64() * inv - sa * x.as_f64()));
            }
        }
        let gb = grad.row_mut(b);
        for ((g, &x), &y) in gb.iter_mut().zip(&ha).zip(&hb) {
            *g = *g + T::from_f64(coef * (x.as_f64() * inv - sb * y.as_f64()));
        }
    }
}

fn evaluate<T: Real>(
    sextets: &[Sextet],
    h: &DenseMatrix<T>,
    affinity: &SparseMatrix<f32>,
    weights: &LossWeights,
    kind: LocalLoss,
    params: &ModelParams<T>,
    mut grad: Option<&mut DenseMatrix<T>>,
) -> Result<BatchLoss> {
    if sextets.is_empty() {
        return Err(Error::param("empty sextet batch"));
    }
    if affinity.rows() != h.rows() {
        return Err(Error::shape(format!(
            "affinity has {} rows, representation {}",
            affinity.rows(),
            h.rows()
        )));
    }
    if let Some(s) = sextets.iter().find(|s| s.nodes().iter().any(|&x| x >= h.rows())) {
        return Err(Error::param(format!("sextet {s:?} out of range for {} rows", h.rows())));
    }
    let cos = Cosines { h };
    let scale = 1.0 / sextets.len() as f64;
    let mut total = 0.0;
    let (mut clamped_local, mut clamped_global) = (0, 0);
    for s in sextets {
        let [ni, nj, nk, nl, nu, nv] = <[f64; 6]>::try_from(norms(h, &s.nodes())).unwrap();
        let s_ij = cos.value(s.i, s.j, ni, nj);
        let s_iu = cos.value(s.i, s.u, ni, nu);
        let s_kl = cos.value(s.k, s.l, nk, nl);
        let s_kv = cos.value(s.k, s.v, nk, nv);
        let s_ki = cos.value(s.k, s.i, nk, ni);
        let s_li = cos.value(s.l, s.i, nl, ni);
        let s_lj = cos.value(s.l, s.j, nl, nj);

        let (l1, d1, c1) = local_term(kind, s_ij - s_iu);
        let (l2, d2, c2) = local_term(kind, s_kl - s_kv);
        let a_ij = affinity.get(s.i, s.j) as f64;
        let a_kl = affinity.get(s.k, s.l) as f64;
        let (lg, dg, cg) = global_term(a_ij, a_kl, s_ki, s_li, s_lj, weights.beta);
        total += l1 + l2 + weights.alpha_loss * lg;
        clamped_local += c1 as usize + c2 as usize;
        clamped_global += cg as usize;

        if let Some(g) = grad.as_deref_mut() {
            let ag = weights.alpha_loss * scale;
            cos.accumulate(g, s.i, s.j, ni, nj, scale * d1);
            cos.accumulate(g, s.i, s.u, ni, nu, -scale * d1);
            cos.accumulate(g, s.k, s.l, nk, nl, scale * d2);
            cos.accumulate(g, s.k, s.v, nk, nv, -scale * d2);
            cos.accumulate(g, s.k, s.i, nk, ni, ag * dg[0]);
            cos.accumulate(g, s.l, s.i, nl, ni, ag * dg[1]);
            cos.accumulate(g, s.l, s.j, nl, nj, ag * dg[2]);
        }
    }
    let penalty = weights.lambda * params.sum_squares();
    Ok(BatchLoss {
        loss: total * scale + penalty,
        penalty,
        clamped_local,
        clamped_global,
    })
}

/// Mean over the batch of two local terms plus `alpha_loss` times the global
/// term, plus `lambda · Σ‖W‖²`. Indices in `sextets` address rows of `h` and
/// `affinity`.
pub fn batch_loss<T: Real>(
    sextets: &[Sextet],
    h: &DenseMatrix<T>,
    affinity: &SparseMatrix<f32>,
    weights: &LossWeights,
    kind: LocalLoss,
    params: &ModelParams<T>,
) -> Result<BatchLoss> {
    evaluate(sextets, h, affinity, weights, kind, params, None)
}

/// [`batch_loss`] together with its gradient with respect to `h`. The
/// penalty gradient is added separately by [`add_penalty_grad`].
pub fn batch_loss_and_grad<T: Real>(
    sextets: &[Sextet],
    h: &DenseMatrix<T>,
    affinity: &SparseMatrix<f32>,
    weights: &LossWeights,
    kind: LocalLoss,
    params: &ModelParams<T>,
) -> Result<(BatchLoss, DenseMatrix<T>)> {
    let mut grad = DenseMatrix::zeros(h.rows(), h.cols());
    let loss = evaluate(sextets, h, affinity, weights, kind, params, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Adds `2λW` to every weight gradient.
pub fn add_penalty_grad<T: Real>(grads: &mut [crate::model::LayerParams<T>], params: &ModelParams<T>, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    let two_l = T::from_f64(2.0 * lambda);
    for (g, p) in grads.iter_mut().zip(&params.layers) {
        for (gv, &w) in g.w1.as_mut_slice().iter_mut().zip(p.w1.as_slice()) {
            *gv = *gv + two_l * w;
        }
        for (gv, &w) in g.w2.as_mut_slice().iter_mut().zip(p.w2.as_slice()) {
            *gv = *gv + two_l * w;
        }
    }
}
