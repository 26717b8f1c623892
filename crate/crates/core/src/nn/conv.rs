//! 2-D convolution via im2col + GEMM.
//!
//! Forward work is split into output-row strips whose size depends only on
//! the tensor shape, so the set of GEMM calls (and therefore every floating
//! point result) is identical whether strips run in parallel or not.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;

use super::{join, normal_init, ParamFn, ParamMutFn, Scalar};
use crate::exec;

/// Target strip area (output pixels) for forward decomposition.
const STRIP_PIXELS: usize = 8192;

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Array4<T>, // (cout, cin, kh, kw)
    pub b: Array1<T>,
    pub stride: usize,
    pub pad: usize,
    pub gw: Array4<T>,
    pub gb: Array1<T>,
}

pub struct ConvCtx<T: Scalar> {
    x: Array4<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Array4::from_shape_fn((cout, cin, kernel, kernel), |_| normal_init(rng, std));
        Conv2d {
            w,
            b: Array1::zeros(cout),
            stride,
            pad,
            gw: Array4::zeros((cout, cin, kernel, kernel)),
            gb: Array1::zeros(cout),
        }
    }

    /// Zero-initialized convolution (residual branches start as identity).
    pub fn new_zeroed(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Array4::zeros((cout, cin, kernel, kernel)),
            b: Array1::zeros(cout),
            stride,
            pad,
            gw: Array4::zeros((cout, cin, kernel, kernel)),
            gb: Array1::zeros(cout),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, ConvCtx<T>) {
        let y = self.forward_no_ctx(x);
        (y, ConvCtx { x: x.clone() })
    }

    pub fn forward_no_ctx(&self, x: &Array4<T>) -> Array4<T> {
        let (n, cin, h, w) = dims4(x);
        let (cout, cin_w, kh, kw) = dims4(&self.w);
        assert_eq!(cin, cin_w, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let k = cin * kh * kw;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((cout, k))
            .expect("weights are contiguous");

        let strip_rows = (STRIP_PIXELS / wo.max(1)).max(1).min(ho);
        let mut jobs = Vec::new();
        for item in 0..n {
            for rows in exec::ranges(ho, strip_rows) {
                jobs.push((item, rows));
            }
        }

        let strips: Vec<Array2<T>> = exec::map_jobs(jobs.clone(), |(item, rows)| {
            let xi = x.index_axis(Axis(0), item);
            let cols = im2col(&xi, kh, kw, self.stride, self.pad, rows.clone(), wo);
            let mut y2 = Array2::zeros((cout, (rows.end - rows.start) * wo));
            general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut y2);
            y2
        });

        let mut y = Array4::zeros((n, cout, ho, wo));
        for ((item, rows), strip) in jobs.into_iter().zip(strips) {
            let strip3 = strip
                .into_shape_with_order((cout, rows.end - rows.start, wo))
                .expect("strip is contiguous");
            y.slice_mut(ndarray::s![item, .., rows.start..rows.end, ..])
                .assign(&strip3);
        }
        y += &self.b.view().insert_axis(Axis(0)).insert_axis(Axis(2)).insert_axis(Axis(3));
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, ctx: &ConvCtx<T>, dy: &Array4<T>) -> Array4<T> {
        let x = &ctx.x;
        let (n, cin, h, w) = dims4(x);
        let (cout, _, kh, kw) = dims4(&self.w);
        let (ho, wo) = self.out_hw(h, w);
        let k = cin * kh * kw;
        let w2 = self
            .w
            .view()
            .into_shape_with_order((cout, k))
            .expect("weights are contiguous");

        // One job per batch item: disjoint dx, private gw/gb partials.
        let parts: Vec<(Array2<T>, Array1<T>, Array2<T>)> = exec::map_indexed(n, |item| {
            let xi = x.index_axis(Axis(0), item);
            let cols = im2col(&xi, kh, kw, self.stride, self.pad, 0..ho, wo);
            let dyi = dy
                .index_axis(Axis(0), item)
                .into_shape_with_order((cout, ho * wo))
                .expect("dy is contiguous");
            let mut gw_part = Array2::zeros((cout, k));
            general_mat_mul(T::one(), &dyi, &cols.t(), T::zero(), &mut gw_part);
            let gb_part = dyi.sum_axis(Axis(1));
            let mut dcols = Array2::zeros((k, ho * wo));
            general_mat_mul(T::one(), &w2.t(), &dyi, T::zero(), &mut dcols);
            (gw_part, gb_part, dcols)
        });

        let mut dx = Array4::zeros((n, cin, h, w));
        for (item, (gw_part, gb_part, dcols)) in parts.into_iter().enumerate() {
            let gw_flat = gw_part
                .into_shape_with_order((cout, cin, kh, kw))
                .expect("gw partial is contiguous");
            self.gw += &gw_flat;
            self.gb += &gb_part;
            let mut dxi = dx.index_axis_mut(Axis(0), item);
            col2im_add(&dcols, &mut dxi, kh, kw, self.stride, self.pad, ho, wo);
        }
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

fn dims4<T>(a: &Array4<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

/// Unfold output rows `rows` of one item into a `(cin*kh*kw, |rows|*wo)`
/// matrix. Out-of-bounds taps stay zero (zero padding).
fn im2col<T: Scalar>(
    x: &ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    rows: std::ops::Range<usize>,
    wo: usize,
) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = (rows.end - rows.start) * wo;
    let mut cols = Array2::zeros((cin * kh * kw, m));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let mut row = cols.row_mut(r);
                let row_slice = row.as_slice_mut().expect("row of standard-layout matrix");
                for (si, oy) in rows.clone().enumerate() {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut row_slice[si * wo..(si + 1) * wo];
                    if stride == 1 {
                        // ix = ox + kx - pad; copy the in-bounds span at once.
                        let ox_lo = pad.saturating_sub(kx);
                        let ox_hi = (w + pad - kx).min(wo);
                        if ox_lo < ox_hi {
                            let ix_lo = ox_lo + kx - pad;
                            let src = x.slice(ndarray::s![ci, iy, ix_lo..ix_lo + (ox_hi - ox_lo)]);
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(src.as_slice().expect("contiguous row"));
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = x[(ci, iy, ix as usize)];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `(cin*kh*kw, ho*wo)` gradient matrix back onto the input,
/// accumulating overlapping taps.
fn col2im_add<T: Scalar>(
    dcols: &Array2<T>,
    dx: &mut ndarray::ArrayViewMut3<'_, T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (cin, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let row = dcols.row(r);
                let row_slice = row.as_slice().expect("row of standard-layout matrix");
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = &row_slice[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ci, iy, ix as usize)] = dx[(ci, iy, ix as usize)] + g;
                        }
                    }
                }
            }
        }
    }
}
