//! Group normalization.

use ndarray::{Array1, Array4};

use super::{join, sc, ParamFn, ParamMutFn, Scalar};

const EPS: f64 = 1e-5;

/// Largest divisor of `channels` that is at most 8; keeps tiny ablation
/// configs valid while matching the usual 8-channel groups elsewhere.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub groups: usize,
    pub ggamma: Array1<T>,
    pub gbeta: Array1<T>,
}

pub struct GroupNormCtx<T: Scalar> {
    x: Array4<T>,
    mean: Vec<T>, // (n * groups)
    rstd: Vec<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups: group_count(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, GroupNormCtx<T>) {
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cg = c / self.groups;
        let group_len = (cg * h * w) as f64;
        let mut y = x.clone();
        let mut means = Vec::with_capacity(n * self.groups);
        let mut rstds = Vec::with_capacity(n * self.groups);
        for item in 0..n {
            for g in 0..self.groups {
                let sl = ndarray::s![item, g * cg..(g + 1) * cg, .., ..];
                let view = x.slice(sl);
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for &v in view.iter() {
                    let v = v.to_f64_exact();
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / group_len;
                let var = (sq / group_len - mean * mean).max(0.0);
                let rstd = 1.0 / (var + EPS).sqrt();
                means.push(sc::<T>(mean));
                rstds.push(sc::<T>(rstd));
                let (mean_t, rstd_t) = (sc::<T>(mean), sc::<T>(rstd));
                let mut out = y.slice_mut(sl);
                for (ci, mut plane) in out.outer_iter_mut().enumerate() {
                    let ch = g * cg + ci;
                    let (gam, bet) = (self.gamma[ch], self.beta[ch]);
                    plane.mapv_inplace(|v| (v - mean_t) * rstd_t * gam + bet);
                }
            }
        }
        (
            y,
            GroupNormCtx { x: x.clone(), mean: means, rstd: rstds },
        )
    }

    pub fn backward(&mut self, ctx: &GroupNormCtx<T>, dy: &Array4<T>) -> Array4<T> {
        let x = &ctx.x;
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cg = c / self.groups;
        let group_len = sc::<T>((cg * h * w) as f64);
        let mut dx = Array4::zeros(x.raw_dim());

        // Per-channel parameter gradients.
        for ch in 0..c {
            let g = ch / cg;
            let mut ggam = T::zero();
            let mut gbet = T::zero();
            for item in 0..n {
                let mean = ctx.mean[item * self.groups + g];
                let rstd = ctx.rstd[item * self.groups + g];
                let xv = x.slice(ndarray::s![item, ch, .., ..]);
                let dv = dy.slice(ndarray::s![item, ch, .., ..]);
                for (&xi, &di) in xv.iter().zip(dv.iter()) {
                    ggam = ggam + di * (xi - mean) * rstd;
                    gbet = gbet + di;
                }
            }
            self.ggamma[ch] = self.ggamma[ch] + ggam;
            self.gbeta[ch] = self.gbeta[ch] + gbet;
        }

        // Input gradient, group by group.
        for item in 0..n {
            for g in 0..self.groups {
                let mean = ctx.mean[item * self.groups + g];
                let rstd = ctx.rstd[item * self.groups + g];
                let sl = ndarray::s![item, g * cg..(g + 1) * cg, .., ..];
                let xv = x.slice(sl);
                let dv = dy.slice(sl);
                // dxhat = dy * gamma (per channel); need its mean and the
                // mean of dxhat * xhat over the group.
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for (ci, (xp, dp)) in xv.outer_iter().zip(dv.outer_iter()).enumerate() {
                    let gam = self.gamma[g * cg + ci];
                    for (&xi, &di) in xp.iter().zip(dp.iter()) {
                        let xhat = (xi - mean) * rstd;
                        let dxhat = di * gam;
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                }
                let mean_dxhat = sum_dxhat / group_len;
                let mean_dxhat_xhat = sum_dxhat_xhat / group_len;
                let mut dxv = dx.slice_mut(sl);
                for (ci, (xp, mut dxp)) in xv.outer_iter().zip(dxv.outer_iter_mut()).enumerate() {
                    let gam = self.gamma[g * cg + ci];
                    let dp = dv.slice(ndarray::s![ci, .., ..]);
                    for ((&xi, &di), o) in xp.iter().zip(dp.iter()).zip(dxp.iter_mut()) {
                        let xhat = (xi - mean) * rstd;
                        let dxhat = di * gam;
                        *o = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.ggamma.fill(T::zero());
        self.gbeta.fill(T::zero());
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, T>) {
        f(&join(prefix, "gamma"), self.gamma.view().into_dyn());
        f(&join(prefix, "beta"), self.beta.view().into_dyn());
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, T>) {
        f(&join(prefix, "gamma"), self.gamma.view_mut().into_dyn(), self.ggamma.view_mut().into_dyn());
        f(&join(prefix, "beta"), self.beta.view_mut().into_dyn(), self.gbeta.view_mut().into_dyn());
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[allow(unused_imports)]
use ndarray::Axis as _AxisUnused;
