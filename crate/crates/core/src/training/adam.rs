//! Adam with bias correction and a step learning-rate schedule.

use crate::dataio::OptimizerBlob;
use crate::error::{Error, Result};
use crate::kernels::{DenseMatrix, Real};
use crate::model::{LayerParams, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `base` before epoch 30, halved until epoch 100, quartered afterwards.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    match epoch {
        0..30 => base_lr,
        30..100 => base_lr / 2.0,
        _ => base_lr / 4.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    m: Vec<LayerParams<T>>,
    v: Vec<LayerParams<T>>,
}

fn update<T: Real>(w: &mut DenseMatrix<T>, g: &DenseMatrix<T>, m: &mut DenseMatrix<T>, v: &mut DenseMatrix<T>, c: [f64; 5]) {
    let [b1, b2, eps, lr, _] = c;
    let (bc1, bc2) = (1.0 - b1.powf(c[4]), 1.0 - b2.powf(c[4]));
    let it = w
        .as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
    for ((wv, &gv), (mv, vv)) in it {
        let gv = gv.as_f64();
        let m_new = b1 * mv.as_f64() + (1.0 - b1) * gv;
        let v_new = b2 * vv.as_f64() + (1.0 - b2) * gv * gv;
        *mv = T::from_f64(m_new);
        *vv = T::from_f64(v_new);
        let m_hat = m_new / bc1;
        let v_hat = v_new / bc2;
        *wv = T::from_f64(wv.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
    }
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &[LayerParams<T>], lr: f64) -> Result<()> {
        if grads.len() != params.layers.len() || self.m.len() != params.layers.len() {
            return Err(Error::State("optimizer, gradients and model disagree on layer count".into()));
        }
        for ((p, g), m) in params.layers.iter().zip(grads).zip(&self.m) {
            if p.w1.shape() != g.w1.shape() || p.w2.shape() != g.w2.shape() || m.w1.shape() != p.w1.shape() {
                return Err(Error::State("gradient shape differs from parameter shape".into()));
            }
        }
        self.step += 1;
        let c = [self.beta1, self.beta2, self.eps, lr, self.step as f64];
        for (((p, g), m), v) in params.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            update(&mut p.w1, &g.w1, &mut m.w1, &mut v.w1, c);
            update(&mut p.w2, &g.w2, &mut m.w2, &mut v.w2, c);
        }
        Ok(())
    }
}

impl Adam<f32> {
    pub fn to_blob(&self, epoch: u64) -> OptimizerBlob {
        OptimizerBlob {
            epoch,
            step: self.step,
            moments: self
                .m
                .iter()
                .zip(&self.v)
                .map(|(m, v)| [m.w1.clone(), v.w1.clone(), m.w2.clone(), v.w2.clone()])
                .collect(),
        }
    }

    pub fn from_blob(blob: &OptimizerBlob, params: &ModelParams<f32>) -> Result<Self> {
        if blob.moments.len() != params.layers.len() {
            return Err(Error::State(format!(
                "optimizer state has {} layers, model {}",
                blob.moments.len(),
                params.layers.len()
            )));
        }
        let mut adam = Adam::new(params);
        adam.step = blob.step;
        for (l, [m1, v1, m2, v2]) in blob.moments.iter().enumerate() {
            let p = &params.layers[l];
            if m1.shape() != p.w1.shape() || v1.shape() != p.w1.shape() || m2.shape() != p.w2.shape() || v2.shape() != p.w2.shape() {
                return Err(Error::State(format!("optimizer moments of layer {l} have the wrong shape")));
            }
            adam.m[l] = LayerParams { w1: m1.clone(), w2: m2.clone() };
            adam.v[l] = LayerParams { w1: v1.clone(), w2: v2.clone() };
        }
        Ok(adam)
    }
}
