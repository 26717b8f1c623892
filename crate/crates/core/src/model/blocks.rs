//! Residual and attention blocks for the denoising U-Net.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::nn::attn::{Attention, AttentionCtx};
use crate::nn::conv::{Conv2d, ConvCtx};
use crate::nn::linear::Linear;
use crate::nn::norm::{GroupNorm, GroupNormCtx};
use crate::nn::ops::{silu, silu2, silu2_backward, silu_backward};
use crate::nn::{join, ParamFn, ParamMutFn, Scalar};

/// Residual block with per-block scale/shift time conditioning.
///
/// ```text
/// h = conv1(silu(gn1(x)))
/// (s, b) = time_proj(silu(temb))
/// h = gn2(h) * (1 + s) + b
/// y = conv2(silu(h)) + skip(x)
/// ```
#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar> {
    pub gn1: GroupNorm<T>,
    pub conv1: Conv2d<T>,
    pub time_proj: Linear<T>,
    pub gn2: GroupNorm<T>,
    pub conv2: Conv2d<T>,
    pub skip: Option<Conv2d<T>>,
    out_channels: usize,
}

pub struct ResBlockCtx<T: Scalar> {
    gn1_ctx: GroupNormCtx<T>,
    gn1_out: Array4<T>,
    conv1_ctx: ConvCtx<T>,
    temb: Array2<T>,
    temb_act: Array2<T>,
    gn2_ctx: GroupNormCtx<T>,
    gn2_out: Array4<T>,
    scale: Array2<T>,
    modulated: Array4<T>,
    conv2_ctx: ConvCtx<T>,
    skip_ctx: Option<ConvCtx<T>>,
}

impl<T: Scalar> ResBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, time_dim: usize, rng: &mut R) -> Self {
        ResBlock {
            gn1: GroupNorm::new(cin),
            conv1: Conv2d::new(cin, cout, 3, 1, 1, rng),
            // Zero-initialized: blocks start without time modulation.
            time_proj: Linear::new_zeroed(time_dim, 2 * cout),
            gn2: GroupNorm::new(cout),
            conv2: Conv2d::new_zeroed(cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0, rng)),
            out_channels: cout,
        }
    }

    pub fn forward(
        &self,
        x: &Array4<T>,
        temb: &Array2<T>,
        tape: bool,
    ) -> (Array4<T>, Option<ResBlockCtx<T>>) {
        let (gn1_out, gn1_ctx) = self.gn1.forward(x);
        let act1 = silu(&gn1_out);
        let (h, conv1_ctx) = self.conv1.forward(&act1);

        let temb_act = silu2(temb);
        let (sb, _) = self.time_proj.forward(&temb_act);
        let cout = self.out_channels;
        let scale = sb.slice(ndarray::s![.., ..cout]).to_owned();
        let shift = sb.slice(ndarray::s![.., cout..]).to_owned();

        let (gn2_out, gn2_ctx) = self.gn2.forward(&h);
        let mut modulated = gn2_out.clone();
        for (item, mut m) in modulated.outer_iter_mut().enumerate() {
            for (ch, mut plane) in m.outer_iter_mut().enumerate() {
                let s = T::one() + scale[(item, ch)];
                let b = shift[(item, ch)];
                plane.mapv_inplace(|v| v * s + b);
            }
        }
        let act2 = silu(&modulated);
        let (branch, conv2_ctx) = self.conv2.forward(&act2);

        let (skip_out, skip_ctx) = match &self.skip {
            Some(conv) => {
                let (y, c) = conv.forward(x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let y = branch + &skip_out;

        let ctx = tape.then(|| ResBlockCtx {
            gn1_ctx,
            gn1_out,
            conv1_ctx,
            temb: temb.clone(),
            temb_act,
            gn2_ctx,
            gn2_out,
            scale,
            modulated,
            conv2_ctx,
            skip_ctx,
        });
        (y, ctx)
    }

    /// Returns `(dx, dtemb)`.
    pub fn backward(&mut self, ctx: &ResBlockCtx<T>, dy: &Array4<T>) -> (Array4<T>, Array2<T>) {
        let cout = self.out_channels;

        let dact2 = self.conv2.backward(&ctx.conv2_ctx, dy);
        let dmod = silu_backward(&ctx.modulated, &dact2);

        // modulated = gn2_out * (1 + scale) + shift, per (item, channel)
        let n = dmod.shape()[0];
        let mut dgn2 = dmod.clone();
        let mut dsb = Array2::zeros((n, 2 * cout));
        for item in 0..n {
            for ch in 0..cout {
                let s = T::one() + ctx.scale[(item, ch)];
                let dplane = dmod.slice(ndarray::s![item, ch, .., ..]);
                let gplane = ctx.gn2_out.slice(ndarray::s![item, ch, .., ..]);
                let mut ds = T::zero();
                let mut db = T::zero();
                for (&d, &g) in dplane.iter().zip(gplane.iter()) {
                    ds = ds + d * g;
                    db = db + d;
                }
                dsb[(item, ch)] = ds;
                dsb[(item, cout + ch)] = db;
                dgn2
                    .slice_mut(ndarray::s![item, ch, .., ..])
                    .mapv_inplace(|v| v * s);
            }
        }

        let dtemb_act = self.time_proj.backward_with_input(&ctx.temb_act, &dsb);
        let dtemb = silu2_backward(&ctx.temb, &dtemb_act);

        let dh = self.gn2.backward(&ctx.gn2_ctx, &dgn2);
        let dact1 = self.conv1.backward(&ctx.conv1_ctx, &dh);
        let dgn1_out = silu_backward(&ctx.gn1_out, &dact1);
        let mut dx = self.gn1.backward(&ctx.gn1_ctx, &dgn1_out);

        match (&mut self.skip, &ctx.skip_ctx) {
            (Some(conv), Some(sctx)) => {
                dx += &conv.backward(sctx, dy);
            }
            _ => {
                dx += dy;
            }
        }
        (dx, dtemb)
    }

    pub fn zero_grad(&mut self) {
        self.gn1.zero_grad();
        self.conv1.zero_grad();
        self.time_proj.zero_grad();
        self.gn2.zero_grad();
        self.conv2.zero_grad();
        if let Some(s) = &mut self.skip {
            s.zero_grad();
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, T>) {
        self.gn1.visit(&join(prefix, "gn1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.time_proj.visit(&join(prefix, "time_proj"), f);
        self.gn2.visit(&join(prefix, "gn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, T>) {
        self.gn1.visit_mut(&join(prefix, "gn1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.time_proj.visit_mut(&join(prefix, "time_proj"), f);
        self.gn2.visit_mut(&join(prefix, "gn2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.gn1.param_count()
            + self.conv1.param_count()
            + self.time_proj.param_count()
            + self.gn2.param_count()
            + self.conv2.param_count()
            + self.skip.as_ref().map_or(0, |s| s.param_count())
    }
}

/// Pre-norm residual attention block: `y = x + attn(gn(x))`.
#[derive(Debug, Clone)]
pub struct AttnBlock<T: Scalar> {
    pub norm: GroupNorm<T>,
    pub attn: Attention<T>,
}

pub struct AttnBlockCtx<T: Scalar> {
    norm_ctx: GroupNormCtx<T>,
    attn_ctx: AttentionCtx<T>,
}

impl<T: Scalar> AttnBlock<T> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        AttnBlock { norm: GroupNorm::new(channels), attn: Attention::new(channels, rng) }
    }

    pub fn forward(&self, x: &Array4<T>, tape: bool) -> (Array4<T>, Option<AttnBlockCtx<T>>) {
        let (normed, norm_ctx) = self.norm.forward(x);
        let (branch, attn_ctx) = self.attn.forward(&normed, tape);
        let y = branch + x;
        let ctx = match attn_ctx {
            Some(attn_ctx) if tape => Some(AttnBlockCtx { norm_ctx, attn_ctx }),
            _ => None,
        };
        (y, ctx)
    }

    pub fn backward(&mut self, ctx: &AttnBlockCtx<T>, dy: &Array4<T>) -> Array4<T> {
        let dnormed = self.attn.backward(&ctx.attn_ctx, dy);
        let mut dx = self.norm.backward(&ctx.norm_ctx, &dnormed);
        dx += dy;
        dx
    }

    pub fn zero_grad(&mut self) {
        self.norm.zero_grad();
        self.attn.zero_grad();
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamFn<'_, T>) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, T>) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }

    pub fn param_count(&self) -> usize {
        self.norm.param_count() + self.attn.param_count()
    }
}

#[allow(unused_imports)]
use ndarray::Axis as _Unused;
