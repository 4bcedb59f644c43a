//! Stacked graph diffusion layers.
//!
//! Each layer computes
//!
//! ```text
//! P = (I + S) H W1 + S((S H) ⊙ H) W2
//! H' = dropout(l2_normalize(leaky_relu(P)))
//! ```
//!
//! and the learned representation is the concatenation `H⁰ ‖ H¹ ‖ … ‖ Hᴸ`,
//! compared by cosine similarity. Gradients are derived by hand for this
//! fixed graph of operations; see [`backward`].

use rand::Rng;

use crate::dataio::Checkpoint;
use crate::error::{Error, Result};
use crate::kernels::{
    cosine_similarity, gemm_into, hadamard, matmul, norm, spmm, spmm_transpose, DenseMatrix, Real,
    SparseMatrix, NORM_EPS,
};
use crate::rng::{self, Prng};

pub const DEFAULT_HIDDEN: [usize; 3] = [1024, 256, 128];
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub w1: DenseMatrix<T>,
    pub w2: DenseMatrix<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            w1: DenseMatrix::zeros(self.w1.rows(), self.w1.cols()),
            w2: DenseMatrix::zeros(self.w2.rows(), self.w2.cols()),
        }
    }
}

/// Gradients share the parameter layout.
pub type ParamGrads<T = f32> = Vec<LayerParams<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub layers: Vec<LayerParams<T>>,
    /// `[d_0, d_1, …, d_L]`
    pub dims: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl<T: Real> ModelParams<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Width of the concatenated representation, `Σ d_l`.
    pub fn output_width(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.dims.len() != self.layers.len() + 1 {
            return Err(Error::param(format!(
                "{} layers with {} widths",
                self.layers.len(),
                self.dims.len()
            )));
        }
        for (l, p) in self.layers.iter().enumerate() {
            let want = (self.dims[l], self.dims[l + 1]);
            if p.w1.shape() != want || p.w2.shape() != want {
                return Err(Error::shape(format!(
                    "layer {l}: W1 {:?}, W2 {:?}, expected {want:?}",
                    p.w1.shape(),
                    p.w2.shape()
                )));
            }
            if !p.w1.is_finite() || !p.w2.is_finite() {
                return Err(Error::Data(format!("layer {l} has non-finite weights")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    w1: p.w1.cast(),
                    w2: p.w2.cast(),
                })
                .collect(),
            dims: self.dims.clone(),
            leaky_slope: self.leaky_slope,
            dropout: self.dropout,
        }
    }

    /// `Σ ‖W‖²` over every weight matrix.
    pub fn sum_squares(&self) -> f64 {
        self.layers
            .iter()
            .map(|p| p.w1.sum_squares() + p.w2.sum_squares())
            .sum()
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        self.layers.iter().map(LayerParams::zeros_like).collect()
    }
}

impl ModelParams<f32> {
    pub fn from_checkpoint(ckpt: &Checkpoint, leaky_slope: f64, dropout: f64) -> Result<Self> {
        let params = ModelParams {
            layers: ckpt
                .layers
                .iter()
                .map(|(w1, w2)| LayerParams {
                    w1: w1.clone(),
                    w2: w2.clone(),
                })
                .collect(),
            dims: ckpt.dims.clone(),
            leaky_slope,
            dropout,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn layer_pairs(&self) -> Vec<(DenseMatrix<f32>, DenseMatrix<f32>)> {
        self.layers.iter().map(|p| (p.w1.clone(), p.w2.clone())).collect()
    }
}

/// Glorot-uniform weights: every entry of `W1` and `W2` in layer `l` is
/// drawn from `U(−a, a)`, `a = sqrt(6 / (d_l + d_{l+1}))`.
pub fn init_params(dims: &[usize], seed: u64) -> Result<ModelParams<f32>> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::param(format!("invalid layer widths {dims:?}")));
    }
    let mut rng = rng::seeded(seed);
    let mut draw = |rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-a..a) as f32)
            .collect();
        DenseMatrix::from_vec(rows, cols, data).expect("sized buffer")
    };
    let layers = dims
        .windows(2)
        .map(|w| LayerParams {
            w1: draw(w[0], w[1]),
            w2: draw(w[0], w[1]),
        })
        .collect();
    Ok(ModelParams {
        layers,
        dims: dims.to_vec(),
        leaky_slope: DEFAULT_LEAKY_SLOPE,
        dropout: DEFAULT_DROPOUT,
    })
}

pub enum Mode<'a> {
    Eval,
    /// Caches intermediates and applies dropout with the given stream.
    Train(&'a mut Prng),
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    sh: DenseMatrix<T>,
    /// `(I + S) H`
    first_order: DenseMatrix<T>,
    /// `S((S H) ⊙ H)`
    second_order: DenseMatrix<T>,
    pre_activation: DenseMatrix<T>,
    /// Row-normalized activations, before dropout.
    normalized: DenseMatrix<T>,
    /// `max(‖row‖, eps)` of the activations.
    row_norms: Vec<f64>,
    /// `0` or `1/(1−p)` per entry; `None` when dropout is off.
    mask: Option<DenseMatrix<T>>,
}

/// Intermediates of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    /// `H⁰ … Hᴸ` as produced (post-dropout).
    outputs: Vec<DenseMatrix<T>>,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn layer_output(&self, l: usize) -> &DenseMatrix<T> {
        &self.outputs[l]
    }
}

fn leaky<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

fn layer_compute<T: Real>(
    h: &DenseMatrix<T>,
    s: &SparseMatrix<T>,
    params: &LayerParams<T>,
    slope: f64,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<(DenseMatrix<T>, Option<LayerCache<T>>)> {
    if s.rows() != h.rows() || s.cols() != h.rows() {
        return Err(Error::shape(format!(
            "transition {}x{} for {} feature rows",
            s.rows(),
            s.cols(),
            h.rows()
        )));
    }
    if params.w1.rows() != h.cols() {
        return Err(Error::shape(format!(
            "layer expects width {}, got {}",
            params.w1.rows(),
            h.cols()
        )));
    }
    let sh = spmm(s, h)?;
    let first_order = h.add(&sh)?;
    let second_order = spmm(s, &hadamard(&sh, h)?)?;
    let mut pre = matmul(&first_order, false, &params.w1, false)?;
    gemm_into(&second_order, false, &params.w2, false, T::one(), &mut pre)?;

    let slope_t = T::from_f64(slope);
    let mut out = DenseMatrix::zeros(pre.rows(), pre.cols());
    let mut row_norms = Vec::with_capacity(pre.rows());
    for r in 0..pre.rows() {
        let dst = out.row_mut(r);
        for (o, &p) in dst.iter_mut().zip(pre.row(r)) {
            *o = leaky(p, slope_t);
        }
        let len = norm(dst).max(NORM_EPS);
        let inv = T::from_f64(1.0 / len);
        for o in dst.iter_mut() {
            *o = *o * inv;
        }
        row_norms.push(len);
    }

    match mode {
        Mode::Eval => Ok((out, None)),
        Mode::Train(rng) => {
            let normalized = out.clone();
            let mask = if dropout > 0.0 {
                let keep = T::from_f64(1.0 / (1.0 - dropout));
                let mut m = DenseMatrix::zeros(out.rows(), out.cols());
                for v in m.as_mut_slice() {
                    *v = if rng.random::<f64>() < dropout { T::zero() } else { keep };
                }
                for (o, &k) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *o = *o * k;
                }
                Some(m)
            } else {
                None
            };
            let cache = LayerCache {
                sh,
                first_order,
                second_order,
                pre_activation: pre,
                normalized,
                row_norms,
                mask,
            };
            Ok((out, Some(cache)))
        }
    }
}

/// One graph diffusion layer. Returns the layer output and, in training
/// mode, its cache.
pub fn layer_forward<T: Real>(
    h: &DenseMatrix<T>,
    s: &SparseMatrix<T>,
    params: &LayerParams<T>,
    leaky_slope: f64,
    dropout: f64,
    mut mode: Mode<'_>,
) -> Result<DenseMatrix<T>> {
    layer_compute(h, s, params, leaky_slope, dropout, &mut mode).map(|(o, _)| o)
}

/// Full forward pass; returns `H⁰ ‖ … ‖ Hᴸ` and, in training mode, the
/// cache needed by [`backward`].
pub fn forward<T: Real>(
    x: &DenseMatrix<T>,
    s: &SparseMatrix<T>,
    params: &ModelParams<T>,
    mut mode: Mode<'_>,
) -> Result<(DenseMatrix<T>, Option<ForwardCache<T>>)> {
    if x.cols() != params.dims[0] {
        return Err(Error::shape(format!(
            "input width {} but the model expects {}",
            x.cols(),
            params.dims[0]
        )));
    }
    let training = matches!(mode, Mode::Train(_));
    let mut outputs = vec![x.clone()];
    let mut caches = Vec::with_capacity(params.num_layers());
    for layer in &params.layers {
        let (out, cache) = layer_compute(
            outputs.last().unwrap(),
            s,
            layer,
            params.leaky_slope,
            params.dropout,
            &mut mode,
        )?;
        outputs.push(out);
        caches.extend(cache);
    }
    let concat = DenseMatrix::hconcat(&outputs.iter().collect::<Vec<_>>())?;
    let cache = training.then_some(ForwardCache {
        outputs,
        layers: caches,
    });
    Ok((concat, cache))
}

/// Eval-mode embedding of every node.
pub fn embed<T: Real>(x: &DenseMatrix<T>, s: &SparseMatrix<T>, params: &ModelParams<T>) -> Result<DenseMatrix<T>> {
    forward(x, s, params, Mode::Eval).map(|(h, _)| h)
}

/// Cosine similarity between rows `i` and `j` of `h`.
pub fn pairwise_similarity<T: Real>(h: &DenseMatrix<T>, i: usize, j: usize) -> Result<f64> {
    if i >= h.rows() || j >= h.rows() {
        return Err(Error::param(format!("row index out of range for {} rows", h.rows())));
    }
    cosine_similarity(h.row(i), h.row(j))
}

/// Reverse pass: gradients of the loss with respect to every `W1`, `W2`,
/// given `∂L/∂H` for the concatenated representation.
pub fn backward<T: Real>(
    grad_concat: &DenseMatrix<T>,
    cache: &ForwardCache<T>,
    s: &SparseMatrix<T>,
    params: &ModelParams<T>,
) -> Result<ParamGrads<T>> {
    let nl = params.num_layers();
    if cache.layers.len() != nl || cache.outputs.len() != nl + 1 {
        return Err(Error::State(format!(
            "cache holds {} layers, model has {nl}",
            cache.layers.len()
        )));
    }
    let n = cache.outputs[0].rows();
    if grad_concat.shape() != (n, params.output_width()) {
        return Err(Error::State(format!(
            "upstream gradient is {:?}, expected {:?}",
            grad_concat.shape(),
            (n, params.output_width())
        )));
    }
    for (l, out) in cache.outputs.iter().enumerate() {
        if out.cols() != params.dims[l] {
            return Err(Error::State(format!("cached layer {l} width differs from model")));
        }
    }

    let offsets: Vec<usize> = params
        .dims
        .iter()
        .scan(0, |acc, &d| {
            let start = *acc;
            *acc += d;
            Some(start)
        })
        .collect();
    let slope = T::from_f64(params.leaky_slope);
    let mut grads: Vec<Option<LayerParams<T>>> = vec![None; nl];
    // gradient flowing into the output of the current layer from above
    let mut carry: Option<DenseMatrix<T>> = None;

    for l in (0..nl).rev() {
        let c = &cache.layers[l];
        let p = &params.layers[l];
        let input = &cache.outputs[l];
        let d_out = params.dims[l + 1];

        let mut g = grad_concat.column_block(offsets[l + 1], offsets[l + 1] + d_out);
        if let Some(extra) = carry.take() {
            g.add_assign(&extra)?;
        }
        if let Some(mask) = &c.mask {
            g = hadamard(&g, mask)?;
        }
        // through the row normalization, then the activation
        for r in 0..n {
            let y = c.normalized.row(r);
            let len = c.row_norms[r];
            let gr = g.row_mut(r);
            let proj = if len > NORM_EPS {
                T::from_f64(crate::kernels::dot(y, gr))
            } else {
                T::zero()
            };
            let inv = T::from_f64(1.0 / len);
            for ((gv, &yv), &pv) in gr.iter_mut().zip(y).zip(c.pre_activation.row(r)) {
                let ga = (*gv - yv * proj) * inv;
                *gv = if pv > T::zero() { ga } else { ga * slope };
            }
        }
        let g_pre = g;

        let gw1 = matmul(&c.first_order, true, &g_pre, false)?;
        let gw2 = matmul(&c.second_order, true, &g_pre, false)?;
        grads[l] = Some(LayerParams { w1: gw1, w2: gw2 });

        if l > 0 {
            let g_first = matmul(&g_pre, false, &p.w1, true)?;
            let g_second = matmul(&g_pre, false, &p.w2, true)?;
            // second_order = S Q with Q = (S H) ⊙ H
            let g_q = spmm_transpose(s, &g_second)?;
            let mut g_h = g_first.clone();
            g_h.add_assign(&spmm_transpose(s, &g_first)?)?;
            g_h.add_assign(&hadamard(&g_q, &c.sh)?)?;
            g_h.add_assign(&spmm_transpose(s, &hadamard(&g_q, input)?)?)?;
            carry = Some(g_h);
        }
    }
    Ok(grads.into_iter().map(|g| g.expect("every layer visited")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::l2_normalize_rows;
    use rand::SeedableRng;

    fn params_from(w1: DenseMatrix<f64>, w2: DenseMatrix<f64>) -> ModelParams<f64> {
        ModelParams {
            dims: vec![w1.rows(), w1.cols()],
            layers: vec![LayerParams { w1, w2 }],
            leaky_slope: 0.2,
            dropout: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&[102, 1024, 256, 128], 5).unwrap();
        assert_eq!(a, init_params(&[102, 1024, 256, 128], 5).unwrap());
        assert_ne!(a, init_params(&[102, 1024, 256, 128], 6).unwrap());
        let shapes: Vec<_> = a.layers.iter().map(|p| (p.w1.shape(), p.w2.shape())).collect();
        assert_eq!(
            shapes,
            vec![((102, 1024), (102, 1024)), ((1024, 256), (1024, 256)), ((256, 128), (256, 128))]
        );
        for (l, p) in a.layers.iter().enumerate() {
            let bound = (6.0 / (a.dims[l] + a.dims[l + 1]) as f64).sqrt();
            let max = p.w1.as_slice().iter().chain(p.w2.as_slice()).map(|v| v.abs() as f64).fold(0.0, f64::max);
            assert!(max <= bound, "layer {l}: {max} > {bound}");
            // the draws should come close to the bound
            assert!(max > 0.99 * bound);
        }
        assert!(init_params(&[3], 0).is_err());
    }

    #[test]
    fn zero_transition_identity_weights() {
        let h = DenseMatrix::from_rows(&[vec![3.0f64, 4.0], vec![0.5, 0.0], vec![1.0, 1.0]]).unwrap();
        let s = SparseMatrix::<f64>::zeros(3, 3);
        let p = params_from(DenseMatrix::identity(2), DenseMatrix::zeros(2, 2));
        let out = layer_forward(&h, &s, &p.layers[0], 0.2, 0.3, Mode::Eval).unwrap();
        assert!(out.max_abs_diff(&l2_normalize_rows(&h, NORM_EPS)) < 1e-15);
    }

    #[test]
    fn isolated_node() {
        let h = DenseMatrix::from_rows(&[vec![1.0f64, -2.0]]).unwrap();
        let w1 = DenseMatrix::from_rows(&[vec![0.5, -1.0], vec![0.25, 1.0]]).unwrap();
        let p = params_from(w1.clone(), DenseMatrix::filled(2, 2, 7.0));
        let out = layer_forward(&h, &SparseMatrix::zeros(1, 1), &p.layers[0], 0.2, 0.0, Mode::Eval).unwrap();
        let hw = matmul(&h, false, &w1, false).unwrap();
        let act = DenseMatrix::from_vec(1, 2, hw.as_slice().iter().map(|&v| if v > 0.0 { v } else { 0.2 * v }).collect()).unwrap();
        assert!(out.max_abs_diff(&l2_normalize_rows(&act, NORM_EPS)) < 1e-15);
    }

    #[test]
    fn path_graph_hand_oracle() {
        // path 0–1–2 with unit affinities: degrees (1, 2, 1)
        let r = 1.0 / 2f64.sqrt();
        let s_dense = DenseMatrix::from_rows(&[vec![0.0, r, 0.0], vec![r, 0.0, r], vec![0.0, r, 0.0]]).unwrap();
        let s = SparseMatrix::from_dense(&s_dense);
        let h = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]]).unwrap();
        let w1 = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let w2 = DenseMatrix::from_rows(&[vec![0.5, -1.0], vec![1.0, 1.0]]).unwrap();

        // every product written out entry by entry
        let get = |m: &DenseMatrix<f64>, i: usize, j: usize| m.get(i, j);
        let mut sh = [[0.0; 2]; 3];
        for i in 0..3 {
            for c in 0..2 {
                sh[i][c] = (0..3).map(|j| get(&s_dense, i, j) * get(&h, j, c)).sum();
            }
        }
        let q: Vec<[f64; 2]> = (0..3).map(|i| [sh[i][0] * get(&h, i, 0), sh[i][1] * get(&h, i, 1)]).collect();
        let mut expected = DenseMatrix::zeros(3, 2);
        for i in 0..3 {
            let m1 = [get(&h, i, 0) + sh[i][0], get(&h, i, 1) + sh[i][1]];
            let sq: Vec<f64> = (0..2).map(|c| (0..3).map(|j| get(&s_dense, i, j) * q[j][c]).sum()).collect();
            let mut row = [0.0; 2];
            for o in 0..2 {
                let v = m1[0] * get(&w1, 0, o) + m1[1] * get(&w1, 1, o) + sq[0] * get(&w2, 0, o) + sq[1] * get(&w2, 1, o);
                row[o] = if v > 0.0 { v } else { 0.2 * v };
            }
            let len = (row[0] * row[0] + row[1] * row[1]).sqrt();
            expected.set(i, 0, row[0] / len);
            expected.set(i, 1, row[1] / len);
        }
        let p = params_from(w1, w2);
        let out = layer_forward(&h, &s, &p.layers[0], 0.2, 0.0, Mode::Eval).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-6);
    }

    #[test]
    fn forward_concatenates_layers() {
        let params = init_params(&[6, 5, 4, 3], 1).unwrap();
        let mut rng = rng::seeded(2);
        let x = DenseMatrix::from_vec(8, 6, (0..48).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let s = SparseMatrix::<f32>::identity(8).scale_values(0.0);
        let (h, cache) = forward(&x, &s, &params, Mode::Eval).unwrap();
        assert!(cache.is_none());
        assert_eq!(h.cols(), 18);
        assert_eq!(h.column_block(0, 6), x);
        let (h2, _) = forward(&x, &s, &params, Mode::Eval).unwrap();
        assert_eq!(h, h2);
        let (_, cache) = forward(&x, &s, &params, Mode::Train(&mut rng::seeded(0))).unwrap();
        let cache = cache.unwrap();
        let mut start = 0;
        let mut pieces = Vec::new();
        for l in 0..4 {
            let w = params.dims[l];
            pieces.push(h.column_block(start, start + w));
            start += w;
        }
        // dropout makes training outputs differ; eval slices rebuild h
        assert_eq!(DenseMatrix::hconcat(&pieces.iter().collect::<Vec<_>>()).unwrap(), h);
        assert_eq!(cache.layer_output(0), &x);
        assert_eq!(params.output_width(), 18);
        assert_eq!(init_params(&[102, 1024, 256, 128], 0).unwrap().output_width(), 1510);
    }

    #[test]
    fn eval_rows_are_unit_or_zero() {
        let params = init_params(&[4, 6, 3], 3).unwrap();
        let mut rng = rng::seeded(4);
        let x = DenseMatrix::from_vec(10, 4, (0..40).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
        let mut s = DenseMatrix::<f32>::zeros(10, 10);
        for i in 0..9 {
            s.set(i, i + 1, 0.5);
            s.set(i + 1, i, 0.5);
        }
        let (_, cache) = forward(&x, &SparseMatrix::from_dense(&s), &ModelParams { dropout: 0.0, ..params.clone() }, Mode::Train(&mut rng)).unwrap();
        for l in 1..3 {
            let out = cache.as_ref().unwrap().layer_output(l);
            for r in 0..10 {
                let len = norm(out.row(r));
                assert!(len == 0.0 || (len - 1.0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn dropout_masks_follow_inverted_scaling() {
        let mut params = init_params(&[3, 400], 7).unwrap();
        params.dropout = 0.3;
        let x = DenseMatrix::filled(5, 3, 0.5f32);
        let s = SparseMatrix::<f32>::zeros(5, 5);
        let (h, _) = forward(&x, &s, &params, Mode::Train(&mut rng::seeded(1))).unwrap();
        let (e, _) = forward(&x, &s, &params, Mode::Eval).unwrap();
        let (tail_h, tail_e) = (h.column_block(3, 403), e.column_block(3, 403));
        let mut dropped = 0;
        for (a, b) in tail_h.as_slice().iter().zip(tail_e.as_slice()) {
            if *a == 0.0 {
                dropped += 1;
            } else {
                assert!((a / b - 1.0 / 0.7).abs() < 1e-5);
            }
        }
        let frac = dropped as f64 / 2000.0;
        assert!((frac - 0.3).abs() < 0.05, "dropped fraction {frac}");
    }

    #[test]
    fn zero_upstream_gradient() {
        let params = init_params(&[4, 5, 3], 2).unwrap();
        let x = DenseMatrix::filled(6, 4, 0.25f32);
        let s = SparseMatrix::<f32>::identity(6).scale_values(0.3);
        let (h, cache) = forward(&x, &s, &params, Mode::Train(&mut rng::seeded(0))).unwrap();
        let grads = backward(&DenseMatrix::zeros(h.rows(), h.cols()), &cache.unwrap(), &s, &params).unwrap();
        for g in grads {
            assert!(g.w1.as_slice().iter().chain(g.w2.as_slice()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cache_mismatch_is_state_error() {
        let params = init_params(&[4, 5, 3], 2).unwrap();
        let other = init_params(&[4, 5], 2).unwrap();
        let x = DenseMatrix::filled(3, 4, 0.25f32);
        let s = SparseMatrix::<f32>::zeros(3, 3);
        let (h, cache) = forward(&x, &s, &other, Mode::Train(&mut rng::seeded(0))).unwrap();
        let err = backward(&DenseMatrix::zeros(h.rows(), 12), &cache.unwrap(), &s, &params);
        assert!(matches!(err, Err(Error::State(_))));
    }

    /// Central differences of `Σ G ⊙ H(params)` against the analytic pass.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rand_xoshiro::Xoshiro256PlusPlus::seed_from_u64(12);
        let n = 7;
        let params = init_params(&[3, 4, 2], 9).unwrap().cast::<f64>();
        let params = ModelParams { dropout: 0.0, ..params };
        let x = DenseMatrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut sd = DenseMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let j = (i + 1) % n;
            sd.set(i, j, 0.4);
            sd.set(j, i, 0.4);
        }
        sd.set(0, 3, 0.2);
        sd.set(3, 0, 0.2);
        let s = SparseMatrix::from_dense(&sd);
        let g = DenseMatrix::from_vec(n, 9, (0..n * 9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let objective = |p: &ModelParams<f64>| -> f64 {
            let (h, _) = forward(&x, &s, p, Mode::Eval).unwrap();
            h.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = forward(&x, &s, &params, Mode::Train(&mut rng::seeded(0))).unwrap();
        let grads = backward(&g, &cache.unwrap(), &s, &params).unwrap();
        let h = 1e-6;
        for l in 0..2 {
            for which in 0..2 {
                let count = params.layers[l].w1.as_slice().len();
                for e in 0..count {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    fn pick(p: &mut ModelParams<f64>, l: usize, which: usize) -> &mut [f64] {
                        if which == 0 { p.layers[l].w1.as_mut_slice() } else { p.layers[l].w2.as_mut_slice() }
                    }
                    pick(&mut plus, l, which)[e] += h;
                    pick(&mut minus, l, which)[e] -= h;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    let an = if which == 0 { grads[l].w1.as_slice()[e] } else { grads[l].w2.as_slice()[e] };
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "layer {l} mat {which} entry {e}: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn gcn_ablation_is_first_order_only() {
        // with W2 = 0 the layer reduces to l2norm(σ((I+S)HW1))
        let mut params = init_params(&[3, 4], 1).unwrap().cast::<f64>();
        params.layers[0].w2 = DenseMatrix::zeros(3, 4);
        let h = DenseMatrix::from_rows(&[vec![1.0, 0.5, -0.5], vec![0.0, 1.0, 2.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let sd = DenseMatrix::from_rows(&[vec![0.0, 0.5, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.5, 0.0]]).unwrap();
        let s = SparseMatrix::from_dense(&sd);
        let out = layer_forward(&h, &s, &params.layers[0], 0.2, 0.0, Mode::Eval).unwrap();
        let m1 = h.add(&matmul(&sd, false, &h, false).unwrap()).unwrap();
        let p = matmul(&m1, false, &params.layers[0].w1, false).unwrap();
        let act = DenseMatrix::from_vec(3, 4, p.as_slice().iter().map(|&v| if v > 0.0 { v } else { 0.2 * v }).collect()).unwrap();
        assert!(out.max_abs_diff(&l2_normalize_rows(&act, NORM_EPS)) < 1e-12);
    }

    #[test]
    fn pairwise_similarity_cases() {
        let h = DenseMatrix::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]).unwrap();
        assert!((pairwise_similarity(&h, 2, 2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pairwise_similarity(&h, 0, 1).unwrap(), 0.0);
        assert!((pairwise_similarity(&h, 0, 2).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert!(pairwise_similarity(&h, 0, 3).is_err());
    }
}
