//! Fully-connected layer.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Axis};
use rand::Rng;

use super::{join, normal_init, sc, ParamFn, ParamMutFn, Scalar};

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Array2<T>, // (out, in)
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
}

pub struct LinearCtx<T: Scalar> {
    x: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| normal_init(rng, std));
        Linear {
            w,
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    /// Zero-initialized variant (used where the block should start as a no-op).
    pub fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    /// `y = x w^T + b` for `x` of shape `(batch, in)`.
    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LinearCtx<T>) {
        let batch = x.shape()[0];
        let out_dim = self.w.shape()[0];
        let mut y = Array2::zeros((batch, out_dim));
        general_mat_mul(T::one(), x, &self.w.t(), T::zero(), &mut y);
        y += &self.b;
        (y, LinearCtx { x: x.clone() })
    }

    pub fn backward(&mut self, ctx: &LinearCtx<T>, dy: &Array2<T>) -> Array2<T> {
        self.backward_with_input(&ctx.x, dy)
    }

    /// Backward pass given the forward input directly (for callers that
    /// already keep the input around).
    pub fn backward_with_input(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut self.gw);
        self.gb += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.raw_dim());
        general_mat_mul(T::one(), dy, &self.w, T::zero(), &mut dx);
        dx
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&join(prefix, "w"), self.w.view().into_dyn());
        f(&join(prefix, "b"), self.b.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, T>) {
        f(&join(prefix, "w"), self.w.view_mut().into_dyn(), self.gw.view_mut().into_dyn());
        f(&join(prefix, "b"), self.b.view_mut().into_dyn(), self.gb.view_mut().into_dyn());
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[allow(dead_code)]
fn _suppress_unused_sc<T: Scalar>() -> T {
    sc(0.0)
}
