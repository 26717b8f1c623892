//! RGB frames in normalized float space.
//!
//! A [`Frame`] is a `(3, H, W)` array of `f32` with the pixel convention
//! `x = 2u/255 - 1` for 8-bit sources, i.e. values nominally in `[-1, 1]`.
//! All image-valued data in the crate (inputs, targets, latents,
//! conditioning images) uses this type.

use ndarray::{Array3, ArrayView3, ArrayViewMut3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

use crate::error::{shape_mismatch, Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Array3<f32>);

impl Frame {
    /// Wrap an existing `(3, H, W)` array.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != CHANNELS {
            return Err(shape_mismatch("frame channels", data.shape(), &[CHANNELS]));
        }
        Ok(Frame(data))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Frame(Array3::zeros((CHANNELS, height, width)))
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Frame(Array3::from_elem((CHANNELS, height, width), value))
    }

    pub fn constant_rgb(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Array3::zeros((CHANNELS, height, width));
        for (c, &v) in rgb.iter().enumerate() {
            data.index_axis_mut(Axis(0), c).fill(v);
        }
        Frame(data)
    }

    /// Standard-normal noise frame, filled in `(c, y, x)` row-major order.
    pub fn standard_normal<R: Rng>(height: usize, width: usize, rng: &mut R) -> Self {
        let mut data = Array3::zeros((CHANNELS, height, width));
        for v in data.iter_mut() {
            *v = rng.sample::<f32, _>(StandardNormal);
        }
        Frame(data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        Frame(Array3::from_shape_fn((CHANNELS, height, width), |(c, y, x)| f(c, y, x)))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.0
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.0.view()
    }

    pub fn view_mut(&mut self) -> ArrayViewMut3<'_, f32> {
        self.0.view_mut()
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.0
    }

    pub fn same_shape(&self, other: &Frame) -> bool {
        self.hw() == other.hw()
    }

    pub fn ensure_same_shape(&self, other: &Frame, context: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_mismatch(context, &[other.height(), other.width()], &[self.height(), self.width()]))
        }
    }

    /// Crop a `h x w` window with top-left corner `(y, x)`; must lie inside.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Frame> {
        if y + h > self.height() || x + w > self.width() {
            return Err(Error::Domain(format!(
                "crop ({y},{x})+{h}x{w} outside frame {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Frame(self.0.slice(ndarray::s![.., y..y + h, x..x + w]).to_owned()))
    }

    /// Toroidal shift: output pixel `(y, x)` reads input `(y - dy, x - dx)`
    /// modulo the frame size, so positive displacement moves content down/right.
    pub fn roll(&self, dy: i64, dx: i64) -> Frame {
        let (h, w) = self.hw();
        let (h_i, w_i) = (h as i64, w as i64);
        let mut out = Array3::zeros((CHANNELS, h, w));
        for c in 0..CHANNELS {
            for y in 0..h {
                let sy = (y as i64 - dy).rem_euclid(h_i) as usize;
                for x in 0..w {
                    let sx = (x as i64 - dx).rem_euclid(w_i) as usize;
                    out[(c, y, x)] = self.0[(c, sy, sx)];
                }
            }
        }
        Frame(out)
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut data = self.0.clone();
        data.invert_axis(Axis(2));
        Frame(data)
    }

    pub fn flip_vertical(&self) -> Frame {
        let mut data = self.0.clone();
        data.invert_axis(Axis(1));
        Frame(data)
    }

    /// Pad on the bottom/right by edge replication up to `(h, w)`.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Result<Frame> {
        let (h0, w0) = self.hw();
        if h < h0 || w < w0 {
            return Err(Error::Domain(format!("pad target {h}x{w} smaller than {h0}x{w0}")));
        }
        if (h, w) == (h0, w0) {
            return Ok(self.clone());
        }
        let mut out = Array3::zeros((CHANNELS, h, w));
        for c in 0..CHANNELS {
            for y in 0..h {
                let sy = y.min(h0 - 1);
                for x in 0..w {
                    let sx = x.min(w0 - 1);
                    out[(c, y, x)] = self.0[(c, sy, sx)];
                }
            }
        }
        Ok(Frame(out))
    }

    /// Bilinear resize with half-pixel center alignment and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Frame {
        let (h, w) = self.hw();
        let scale_y = h as f64 / out_h as f64;
        let scale_x = w as f64 / out_w as f64;
        let mut out = Array3::zeros((CHANNELS, out_h, out_w));
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64) as f32;
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = (sx - x0 as f64) as f32;
                for c in 0..CHANNELS {
                    let top = self.0[(c, y0, x0)] * (1.0 - fx) + self.0[(c, y0, x1)] * fx;
                    let bot = self.0[(c, y1, x0)] * (1.0 - fx) + self.0[(c, y1, x1)] * fx;
                    out[(c, y, x)] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Frame(out)
    }

    /// Quantize to 8-bit with the storage convention `u = round((x+1) * 255/2)`.
    pub fn quantize_u8(&self) -> Array3<u8> {
        self.0.mapv(|x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
    }

    pub fn from_u8(data: &Array3<u8>) -> Result<Frame> {
        if data.shape()[0] != CHANNELS {
            return Err(shape_mismatch("frame channels", data.shape(), &[CHANNELS]));
        }
        Ok(Frame(data.mapv(|u| 2.0 * (u as f32) / 255.0 - 1.0)))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.hw();
        let q = self.quantize_u8();
        let mut buf = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    buf.push(q[(c, y, x)]);
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from frame dims");
        img.save(path)?;
        Ok(())
    }

    /// Load a PNG (or other supported format). 8-bit sources are normalized
    /// by 255, 16-bit sources by 65535.
    pub fn load_png(path: &Path) -> Result<Frame> {
        use image::DynamicImage;
        let img = image::open(path)?;
        let sixteen_bit = matches!(
            img,
            DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
        );
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Array3::zeros((CHANNELS, h, w));
        if sixteen_bit {
            let rgb = img.to_rgb16();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..CHANNELS {
                    data[(c, y as usize, x as usize)] = 2.0 * (p.0[c] as f32) / 65535.0 - 1.0;
                }
            }
        } else {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..CHANNELS {
                    data[(c, y as usize, x as usize)] = 2.0 * (p.0[c] as f32) / 255.0 - 1.0;
                }
            }
        }
        Ok(Frame(data))
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean(&self) -> f64 {
        let n = self.0.len() as f64;
        self.0.iter().map(|&v| v as f64).sum::<f64>() / n
    }

    /// Standard deviation over all spatial positions and channels.
    pub fn spatial_std(&self) -> f64 {
        let n = self.0.len() as f64;
        let mean = self.mean();
        let var = self.0.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        var.sqrt()
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Elementwise `alpha * self + beta * other`.
    pub fn affine_combine(&self, alpha: f32, other: &Frame, beta: f32) -> Result<Frame> {
        self.ensure_same_shape(other, "affine_combine")?;
        let mut out = self.0.clone();
        out.zip_mut_with(&other.0, |a, &b| *a = alpha * *a + beta * b);
        Ok(Frame(out))
    }

    pub fn scale(&self, factor: f32) -> Frame {
        Frame(self.0.mapv(|v| v * factor))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Frame {
        Frame(self.0.mapv(|v| v.clamp(lo, hi)))
    }
}

/// Mean of a non-empty list of frames, accumulated in index order.
pub fn mean_frames(frames: &[Frame]) -> Result<Frame> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Domain("mean of zero frames".into()))?;
    let mut acc = first.data().clone();
    for f in &frames[1..] {
        first.ensure_same_shape(f, "mean_frames")?;
        acc.zip_mut_with(f.data(), |a, &b| *a += b);
    }
    let inv = 1.0 / frames.len() as f32;
    acc.mapv_inplace(|v| v * inv);
    Ok(Frame::new(acc).expect("same shape as input"))
}
