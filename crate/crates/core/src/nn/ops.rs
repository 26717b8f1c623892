//! Parameter-free operations: SiLU, nearest-neighbor upsampling, channel
//! concatenation, and the sinusoidal time embedding.

use ndarray::{Array1, Array2, Array4, Axis};

use super::{sc, Scalar};

pub fn silu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    });
    dx
}

pub fn silu2<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (T::one() + v * (T::one() - s)));
    });
    dx
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    for item in 0..n {
        for ch in 0..c {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    y[(item, ch, yy, xx)] = x[(item, ch, yy / 2, xx / 2)];
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h2, w2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    for item in 0..n {
        for ch in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dx[(item, ch, yy / 2, xx / 2)] =
                        dx[(item, ch, yy / 2, xx / 2)] + dy[(item, ch, yy, xx)];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching non-channel dims")
}

/// Split a channel gradient back into the two concatenated parts.
pub fn split_channels<T: Scalar>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let da = d.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let db = d.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (da, db)
}

/// Sinusoidal embedding of schedule times (one row per batch item).
///
/// Times in `[0, 1]` are scaled by 1000 and projected onto log-spaced
/// frequencies, half sine and half cosine.
pub fn time_embedding<T: Scalar>(t: &Array1<T>, dim: usize) -> Array2<T> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (i, &ti) in t.iter().enumerate() {
        let pos = ti.to_f64_exact() * 1000.0;
        for j in 0..half {
            let freq = (-(10_000.0f64.ln()) * j as f64 / half as f64).exp();
            let arg = pos * freq;
            out[(i, j)] = sc(arg.sin());
            out[(i, half + j)] = sc(arg.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silu_backward_matches_fd() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, xx)| {
            (c as f64 - 0.5) * 0.7 + y as f64 * 0.3 - xx as f64 * 0.2
        });
        let dy = Array4::from_elem((1, 2, 2, 2), 1.0);
        let dx = silu_backward(&x, &dy);
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let lp = silu(&xp).sum();
            xp[idx] -= 2.0 * h;
            let lm = silu(&xp).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Array4::from_shape_fn((1, 1, 2, 3), |(_, _, y, xx)| (y * 3 + xx) as f64);
        let y = upsample_nearest2(&x);
        assert_eq!(y.shape(), &[1, 1, 4, 6]);
        assert_eq!(y[(0, 0, 3, 5)], x[(0, 0, 1, 2)]);
        let dx = upsample_nearest2_backward(&y);
        // Each input cell fans out to 4 outputs.
        assert_eq!(dx[(0, 0, 1, 2)], 4.0 * x[(0, 0, 1, 2)]);
    }

    #[test]
    fn time_embedding_distinguishes_times() {
        let t = ndarray::arr1(&[0.1f64, 0.9]);
        let e = time_embedding(&t, 16);
        let d = (&e.row(0) - &e.row(1)).mapv(f64::abs).sum();
        assert!(d > 0.1);
    }
}
