//! Minimal neural-network layers with hand-written backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! production and in `f64` for finite-difference gradient verification.
//! Layers own their parameters and gradient buffers; backward passes
//! accumulate into the gradients. Work decomposition is a function of tensor
//! sizes only and reductions run in index order, keeping results bitwise
//! reproducible independent of threading.

pub mod adam;
pub mod attn;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;

use ndarray::{ArrayViewD, ArrayViewMutD, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::StandardNormal;

/// Element type for network math: `f32` or `f64`.
pub trait Scalar: NdFloat + FromPrimitive + 'static {
    fn from_f64_exact(x: f64) -> Self;
    fn to_f64_exact(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_exact(x: f64) -> Self {
        x as f32
    }
    fn to_f64_exact(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_exact(x: f64) -> Self {
        x
    }
    fn to_f64_exact(self) -> f64 {
        self
    }
}

/// Shorthand numeric cast.
pub(crate) fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64_exact(x)
}

/// Read-only parameter visitor: `(name, value)` in a stable order.
pub type ParamFn<'c, T> = dyn FnMut(&str, ArrayViewD<'_, T>) + 'c;

/// Mutable visitor over `(name, value, grad)` triples in the same order.
pub type ParamMutFn<'c, T> = dyn FnMut(&str, ArrayViewMutD<'_, T>, ArrayViewMutD<'_, T>) + 'c;

/// Draw from `N(0, std^2)`; samples in f64 so f32 and f64 builds initialized
/// from the same seed hold identical values.
pub(crate) fn normal_init<T: Scalar, R: Rng>(rng: &mut R, std: f64) -> T {
    let z: f64 = rng.sample(StandardNormal);
    sc(z * std)
}

/// Join a parameter name path.
pub(crate) fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}
