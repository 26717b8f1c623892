//! Conditional denoising U-Net.
//!
//! The network maps a noisy image plus conditioning (the two input frames
//! and an upsampled low-resolution intermediate, or zeros in base mode) to
//! a velocity estimate. Input is the channel concatenation
//! `[z | I0 | I2 | C_low]` in that fixed order; self-attention sits at the
//! two lowest-resolution levels by default, and a regression variant reuses
//! the same network as a single-pass predictor.

mod blocks;
mod checkpoint;

pub use checkpoint::{AdamState, Checkpoint, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::frame::{Frame, CHANNELS};
use crate::nn::conv::{Conv2d, ConvCtx};
use crate::nn::linear::Linear;
use crate::nn::norm::{GroupNorm, GroupNormCtx};
use crate::nn::ops::{
    concat_channels, silu, silu2, silu2_backward, silu_backward, split_channels, time_embedding,
    upsample_nearest2, upsample_nearest2_backward,
};
use crate::nn::{join, ParamFn, ParamMutFn, Scalar};
use blocks::{AttnBlock, AttnBlockCtx, ResBlock, ResBlockCtx};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub attention_levels: Vec<usize>,
    pub use_attention: bool,
    pub time_embed_dim: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl ModelConfig {
    /// Desk-scale default: 3 levels, base 32 channels, multipliers 1/2/4,
    /// 2 blocks per level, attention at the two bottom levels.
    pub fn toy() -> Self {
        ModelConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_level: 2,
            attention_levels: default_attention_levels(3),
            use_attention: true,
            time_embed_dim: 128,
            input_channels: 4 * CHANNELS,
            output_channels: CHANNELS,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Spatial downsampling factor between the input and the bottom level.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.num_levels() - 1)
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    fn has_attention(&self, level: usize) -> bool {
        self.use_attention && self.attention_levels.contains(&level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::Config("need at least one level".into()));
        }
        if self.base_channels == 0 || self.blocks_per_level == 0 {
            return Err(Error::Config("channels and blocks must be positive".into()));
        }
        let levels = self.num_levels();
        if self.attention_levels.iter().any(|&l| l >= levels) {
            return Err(Error::Config(format!(
                "attention levels {:?} outside 0..{levels}",
                self.attention_levels
            )));
        }
        if self.input_channels != 4 * self.output_channels {
            return Err(Error::Config(
                "input channels must be 4x output channels (z | I0 | I2 | condition)".into(),
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time embedding dim must be even and >= 2".into()));
        }
        Ok(())
    }
}

/// The paper-default attention placement: the two lowest-resolution levels.
pub fn default_attention_levels(num_levels: usize) -> Vec<usize> {
    if num_levels == 1 {
        vec![0]
    } else {
        vec![num_levels - 2, num_levels - 1]
    }
}

/// Conditioning bundle for the denoiser.
///
/// `c_low` is the bilinearly upsampled lower-resolution intermediate, or
/// exact zeros for base-mode prediction.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub i0: Frame,
    pub i2: Frame,
    pub c_low: Frame,
}

impl ConditionSet {
    pub fn new(i0: Frame, i2: Frame, c_low: Frame) -> Result<Self> {
        i0.ensure_same_shape(&i2, "condition frames")?;
        i0.ensure_same_shape(&c_low, "condition frames")?;
        Ok(ConditionSet { i0, i2, c_low })
    }

    /// Base mode: zero low-resolution condition.
    pub fn base(i0: Frame, i2: Frame) -> Result<Self> {
        let (h, w) = i0.hw();
        Self::new(i0, i2, Frame::zeros(h, w))
    }

    pub fn is_base_mode(&self) -> bool {
        self.c_low.is_all_zero()
    }

    pub fn hw(&self) -> (usize, usize) {
        self.i0.hw()
    }
}

/// Anything that can estimate the velocity for a noisy frame.
pub trait Denoiser: Sync {
    fn denoise(&self, z: &Frame, t: f32, cond: &ConditionSet) -> Result<Frame>;

    /// Spatial divisibility requirement on inputs (the U-Net downsampling
    /// factor); callers pad to a multiple of this.
    fn spatial_factor(&self) -> usize {
        1
    }
}

/// Denoiser from a closure; handy for oracles and tests.
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&Frame, f32, &ConditionSet) -> Result<Frame> + Sync,
{
    fn denoise(&self, z: &Frame, t: f32, cond: &ConditionSet) -> Result<Frame> {
        (self.0)(z, t, cond)
    }
}

struct TimeMlp<T: Scalar> {
    lin1: Linear<T>,
    lin2: Linear<T>,
    dim: usize,
}

struct TimeMlpCtx<T: Scalar> {
    sinusoid: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> TimeMlp<T> {
    fn new<R: rand::Rng>(dim: usize, rng: &mut R) -> Self {
        TimeMlp { lin1: Linear::new(dim, dim, rng), lin2: Linear::new(dim, dim, rng), dim }
    }

    fn forward(&self, t: &Array1<T>) -> (Array2<T>, TimeMlpCtx<T>) {
        let sinusoid = time_embedding(t, self.dim);
        let (hidden, _) = self.lin1.forward(&sinusoid);
        let act = silu2(&hidden);
        let (out, _) = self.lin2.forward(&act);
        (out, TimeMlpCtx { sinusoid, hidden })
    }

    fn backward(&mut self, ctx: &TimeMlpCtx<T>, dout: &Array2<T>) {
        let act = silu2(&ctx.hidden);
        let dact = self.lin2.backward_with_input(&act, dout);
        let dhidden = silu2_backward(&ctx.hidden, &dact);
        let _ = self.lin1.backward_with_input(&ctx.sinusoid, &dhidden);
    }

    fn zero_grad(&mut self) {
        self.lin1.zero_grad();
        self.lin2.zero_grad();
    }

    fn visit(&self, prefix: &str, f: &mut ParamFn<'_, T>) {
        self.lin1.visit(&join(prefix, "lin1"), f);
        self.lin2.visit(&join(prefix, "lin2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamMutFn<'_, T>) {
        self.lin1.visit_mut(&join(prefix, "lin1"), f);
        self.lin2.visit_mut(&join(prefix, "lin2"), f);
    }

    fn param_count(&self) -> usize {
        self.lin1.param_count() + self.lin2.param_count()
    }
}

struct EncLevel<T: Scalar> {
    down: Option<Conv2d<T>>,
    blocks: Vec<ResBlock<T>>,
    attns: Vec<Option<AttnBlock<T>>>,
}

struct DecLevel<T: Scalar> {
    up_conv: Conv2d<T>,
    blocks: Vec<ResBlock<T>>,
    attns: Vec<Option<AttnBlock<T>>>,
}

/// The denoising U-Net.
pub struct UNet<T: Scalar> {
    pub cfg: ModelConfig,
    stem: Conv2d<T>,
    time_mlp: TimeMlp<T>,
    enc: Vec<EncLevel<T>>,
    dec: Vec<DecLevel<T>>, // finest-first: dec[j] refines level num_levels-2-j
    head_norm: GroupNorm<T>,
    head_conv: Conv2d<T>,
}

pub struct UNetCtx<T: Scalar> {
    time_ctx: TimeMlpCtx<T>,
    stem_ctx: ConvCtx<T>,
    enc_ctxs: Vec<EncLevelCtx<T>>,
    dec_ctxs: Vec<DecLevelCtx<T>>,
    head_norm_ctx: GroupNormCtx<T>,
    head_norm_out: Array4<T>,
    head_conv_ctx: ConvCtx<T>,
}

struct EncLevelCtx<T: Scalar> {
    down_ctx: Option<ConvCtx<T>>,
    block_ctxs: Vec<ResBlockCtx<T>>,
    attn_ctxs: Vec<Option<AttnBlockCtx<T>>>,
}

struct DecLevelCtx<T: Scalar> {
    up_conv_ctx: ConvCtx<T>,
    skip_channels: usize,
    block_ctxs: Vec<ResBlockCtx<T>>,
    attn_ctxs: Vec<Option<AttnBlockCtx<T>>>,
}

impl<T: Scalar> UNet<T> {
    /// Deterministically initialize a model from `(config, seed)`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let levels = cfg.num_levels();
        let tdim = cfg.time_embed_dim;

        let stem = Conv2d::new(cfg.input_channels, cfg.level_channels(0), 3, 1, 1, rng);
        let time_mlp = TimeMlp::new(tdim, rng);

        let mut enc = Vec::with_capacity(levels);
        for level in 0..levels {
            let ch = cfg.level_channels(level);
            let down = (level > 0)
                .then(|| Conv2d::new(cfg.level_channels(level - 1), ch, 3, 2, 1, rng));
            let mut blocks = Vec::new();
            let mut attns = Vec::new();
            for _ in 0..cfg.blocks_per_level {
                blocks.push(ResBlock::new(ch, ch, tdim, rng));
                attns.push(cfg.has_attention(level).then(|| AttnBlock::new(ch, rng)));
            }
            enc.push(EncLevel { down, blocks, attns });
        }

        let mut dec = Vec::new();
        for level in (0..levels.saturating_sub(1)).rev() {
            let ch = cfg.level_channels(level);
            let ch_coarser = cfg.level_channels(level + 1);
            let up_conv = Conv2d::new(ch_coarser, ch, 3, 1, 1, rng);
            let mut blocks = Vec::new();
            let mut attns = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let cin = if b == 0 { 2 * ch } else { ch };
                blocks.push(ResBlock::new(cin, ch, tdim, rng));
                attns.push(cfg.has_attention(level).then(|| AttnBlock::new(ch, rng)));
            }
            dec.push(DecLevel { up_conv, blocks, attns });
        }

        let ch0 = cfg.level_channels(0);
        let head_norm = GroupNorm::new(ch0);
        let head_conv = Conv2d::new_zeroed(ch0, cfg.output_channels, 3, 1, 1);

        let model = UNet { cfg, stem, time_mlp, enc, dec, head_norm, head_conv };
        log::info!("built denoiser with {} parameters", model.param_count());
        Ok(model)
    }

    /// Forward pass on a batch. `x` is `(N, input_channels, H, W)`, `t` one
    /// schedule time per item. With `tape` the returned context enables
    /// [`Self::backward`].
    pub fn forward(
        &self,
        x: &Array4<T>,
        t: &Array1<T>,
        tape: bool,
    ) -> Result<(Array4<T>, Option<UNetCtx<T>>)> {
        let shape = x.shape().to_vec();
        if shape[1] != self.cfg.input_channels {
            return Err(shape_mismatch("model input channels", &shape, &[self.cfg.input_channels]));
        }
        let factor = self.cfg.downsample_factor();
        if shape[2] % factor != 0 || shape[3] % factor != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {}x{} not divisible by the model factor {factor}",
                shape[2], shape[3]
            )));
        }
        if t.len() != shape[0] {
            return Err(shape_mismatch("times per batch item", &[t.len()], &[shape[0]]));
        }

        let (temb, time_ctx) = self.time_mlp.forward(t);
        let (mut h, stem_ctx) = self.stem.forward(x);

        let mut skips: Vec<Array4<T>> = Vec::with_capacity(self.enc.len());
        let mut enc_ctxs = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            let mut down_ctx = None;
            if let Some(down) = &level.down {
                let (hd, c) = down.forward(&h);
                h = hd;
                down_ctx = Some(c);
            }
            let mut block_ctxs = Vec::new();
            let mut attn_ctxs = Vec::new();
            for (block, attn) in level.blocks.iter().zip(&level.attns) {
                let (hb, bc) = block.forward(&h, &temb, tape);
                h = hb;
                if let Some(bc) = bc {
                    block_ctxs.push(bc);
                }
                match attn {
                    Some(a) => {
                        let (ha, ac) = a.forward(&h, tape);
                        h = ha;
                        attn_ctxs.push(ac);
                    }
                    None => attn_ctxs.push(None),
                }
            }
            skips.push(h.clone());
            enc_ctxs.push(EncLevelCtx { down_ctx, block_ctxs, attn_ctxs });
        }

        let mut dec_ctxs = Vec::with_capacity(self.dec.len());
        for (j, level) in self.dec.iter().enumerate() {
            let skip = &skips[self.enc.len() - 2 - j];
            let up = upsample_nearest2(&h);
            let (hu, up_conv_ctx) = level.up_conv.forward(&up);
            let skip_channels = hu.shape()[1];
            h = concat_channels(&hu, skip);
            let mut block_ctxs = Vec::new();
            let mut attn_ctxs = Vec::new();
            for (block, attn) in level.blocks.iter().zip(&level.attns) {
                let (hb, bc) = block.forward(&h, &temb, tape);
                h = hb;
                if let Some(bc) = bc {
                    block_ctxs.push(bc);
                }
                match attn {
                    Some(a) => {
                        let (ha, ac) = a.forward(&h, tape);
                        h = ha;
                        attn_ctxs.push(ac);
                    }
                    None => attn_ctxs.push(None),
                }
            }
            dec_ctxs.push(DecLevelCtx { up_conv_ctx, skip_channels, block_ctxs, attn_ctxs });
        }

        let (head_norm_out, head_norm_ctx) = self.head_norm.forward(&h);
        let act = silu(&head_norm_out);
        let (y, head_conv_ctx) = self.head_conv.forward(&act);

        let ctx = tape.then_some(UNetCtx {
            time_ctx,
            stem_ctx,
            enc_ctxs,
            dec_ctxs,
            head_norm_ctx,
            head_norm_out,
            head_conv_ctx,
        });
        Ok((y, ctx))
    }

    /// Backward pass: accumulates parameter gradients, returns the input
    /// gradient.
    pub fn backward(&mut self, ctx: &UNetCtx<T>, dy: &Array4<T>) -> Array4<T> {
        let n = dy.shape()[0];
        let mut dtemb = Array2::zeros((n, self.cfg.time_embed_dim));

        let dact = self.head_conv.backward(&ctx.head_conv_ctx, dy);
        let dnorm_out = silu_backward(&ctx.head_norm_out, &dact);
        let mut dh = self.head_norm.backward(&ctx.head_norm_ctx, &dnorm_out);

        let mut dskips: Vec<Option<Array4<T>>> = vec![None; self.enc.len()];

        for (j, level) in self.dec.iter_mut().enumerate().rev() {
            let lctx = &ctx.dec_ctxs[j];
            for (bi, (block, attn)) in
                level.blocks.iter_mut().zip(level.attns.iter_mut()).enumerate().rev()
            {
                if let Some(a) = attn {
                    let actx = lctx.attn_ctxs[bi].as_ref().expect("attention ctx");
                    dh = a.backward(actx, &dh);
                }
                let (dx, dt) = block.backward(&lctx.block_ctxs[bi], &dh);
                dh = dx;
                dtemb += &dt;
            }
            let (dhu, dskip) = split_channels(&dh, lctx.skip_channels);
            let skip_idx = self.enc.len() - 2 - j;
            dskips[skip_idx] = Some(match dskips[skip_idx].take() {
                Some(mut acc) => {
                    acc += &dskip;
                    acc
                }
                None => dskip,
            });
            let dup = level.up_conv.backward(&lctx.up_conv_ctx, &dhu);
            dh = upsample_nearest2_backward(&dup);
        }

        for (li, level) in self.enc.iter_mut().enumerate().rev() {
            let lctx = &ctx.enc_ctxs[li];
            if let Some(dskip) = dskips[li].take() {
                dh += &dskip;
            }
            for (bi, (block, attn)) in
                level.blocks.iter_mut().zip(level.attns.iter_mut()).enumerate().rev()
            {
                if let Some(a) = attn {
                    let actx = lctx.attn_ctxs[bi].as_ref().expect("attention ctx");
                    dh = a.backward(actx, &dh);
                }
                let (dx, dt) = block.backward(&lctx.block_ctxs[bi], &dh);
                dh = dx;
                dtemb += &dt;
            }
            if let Some(down) = &mut level.down {
                dh = down.backward(lctx.down_ctx.as_ref().expect("down ctx"), &dh);
            }
        }

        let dx = self.stem.backward(&ctx.stem_ctx, &dh);
        self.time_mlp.backward(&ctx.time_ctx, &dtemb);
        dx
    }

    pub fn zero_grad(&mut self) {
        self.stem.zero_grad();
        self.time_mlp.zero_grad();
        for level in &mut self.enc {
            if let Some(d) = &mut level.down {
                d.zero_grad();
            }
            for b in &mut level.blocks {
                b.zero_grad();
            }
            for a in level.attns.iter_mut().flatten() {
                a.zero_grad();
            }
        }
        for level in &mut self.dec {
            level.up_conv.zero_grad();
            for b in &mut level.blocks {
                b.zero_grad();
            }
            for a in level.attns.iter_mut().flatten() {
                a.zero_grad();
            }
        }
        self.head_norm.zero_grad();
        self.head_conv.zero_grad();
    }

    pub fn visit_params(&self, f: &mut ParamFn<'_, T>) {
        self.stem.visit("stem", f);
        self.time_mlp.visit("time", f);
        for (i, level) in self.enc.iter().enumerate() {
            let p = format!("enc{i}");
            if let Some(d) = &level.down {
                d.visit(&join(&p, "down"), f);
            }
            for (b, block) in level.blocks.iter().enumerate() {
                block.visit(&join(&p, &format!("block{b}")), f);
                if let Some(a) = &level.attns[b] {
                    a.visit(&join(&p, &format!("attn{b}")), f);
                }
            }
        }
        for (j, level) in self.dec.iter().enumerate() {
            let p = format!("dec{j}");
            level.up_conv.visit(&join(&p, "up"), f);
            for (b, block) in level.blocks.iter().enumerate() {
                block.visit(&join(&p, &format!("block{b}")), f);
                if let Some(a) = &level.attns[b] {
                    a.visit(&join(&p, &format!("attn{b}")), f);
                }
            }
        }
        self.head_norm.visit("head.norm", f);
        self.head_conv.visit("head.conv", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut ParamMutFn<'_, T>) {
        self.stem.visit_mut("stem", f);
        self.time_mlp.visit_mut("time", f);
        for (i, level) in self.enc.iter_mut().enumerate() {
            let p = format!("enc{i}");
            if let Some(d) = &mut level.down {
                d.visit_mut(&join(&p, "down"), f);
            }
            for (b, (block, attn)) in
                level.blocks.iter_mut().zip(level.attns.iter_mut()).enumerate()
            {
                block.visit_mut(&join(&p, &format!("block{b}")), f);
                if let Some(a) = attn {
                    a.visit_mut(&join(&p, &format!("attn{b}")), f);
                }
            }
        }
        for (j, level) in self.dec.iter_mut().enumerate() {
            let p = format!("dec{j}");
            level.up_conv.visit_mut(&join(&p, "up"), f);
            for (b, (block, attn)) in
                level.blocks.iter_mut().zip(level.attns.iter_mut()).enumerate()
            {
                block.visit_mut(&join(&p, &format!("block{b}")), f);
                if let Some(a) = attn {
                    a.visit_mut(&join(&p, &format!("attn{b}")), f);
                }
            }
        }
        self.head_norm.visit_mut("head.norm", f);
        self.head_conv.visit_mut("head.conv", f);
    }

    pub fn param_count(&self) -> usize {
        let mut count = self.stem.param_count() + self.time_mlp.param_count();
        for level in &self.enc {
            count += level.down.as_ref().map_or(0, |d| d.param_count());
            count += level.blocks.iter().map(|b| b.param_count()).sum::<usize>();
            count += level.attns.iter().flatten().map(|a| a.param_count()).sum::<usize>();
        }
        for level in &self.dec {
            count += level.up_conv.param_count();
            count += level.blocks.iter().map(|b| b.param_count()).sum::<usize>();
            count += level.attns.iter().flatten().map(|a| a.param_count()).sum::<usize>();
        }
        count + self.head_norm.param_count() + self.head_conv.param_count()
    }

    /// Stack `[z | I0 | I2 | C_low]` into a single-item batch.
    pub fn assemble_input(&self, z: &Frame, cond: &ConditionSet) -> Result<Array4<T>> {
        z.ensure_same_shape(&cond.i0, "denoiser conditioning")?;
        z.ensure_same_shape(&cond.i2, "denoiser conditioning")?;
        z.ensure_same_shape(&cond.c_low, "denoiser conditioning")?;
        let (h, w) = z.hw();
        let mut x = Array4::zeros((1, self.cfg.input_channels, h, w));
        for (slot, frame) in [&*z, &cond.i0, &cond.i2, &cond.c_low].iter().enumerate() {
            let mut dst = x.slice_mut(ndarray::s![0, slot * CHANNELS..(slot + 1) * CHANNELS, .., ..]);
            dst.zip_mut_with(&frame.data().view(), |d, &s| *d = T::from_f64_exact(s as f64));
        }
        Ok(x)
    }

    fn output_to_frame(&self, y: &Array4<T>) -> Frame {
        let (h, w) = (y.shape()[2], y.shape()[3]);
        Frame::from_fn(h, w, |c, yy, xx| y[(0, c, yy, xx)].to_f64_exact() as f32)
    }

    /// Single-pass regression variant: zero noise input at `t = 0`, output
    /// interpreted directly as the predicted frame.
    pub fn regress(&self, cond: &ConditionSet) -> Result<Frame> {
        let (h, w) = cond.hw();
        let z = Frame::zeros(h, w);
        let x = self.assemble_input(&z, cond)?;
        let t = Array1::from_elem(1, T::zero());
        let (y, _) = self.forward(&x, &t, false)?;
        Ok(self.output_to_frame(&y))
    }
}

impl Denoiser for UNet<f32> {
    fn denoise(&self, z: &Frame, t: f32, cond: &ConditionSet) -> Result<Frame> {
        let x = self.assemble_input(z, cond)?;
        let t = Array1::from_elem(1, t);
        let (y, _) = self.forward(&x, &t, false)?;
        Ok(self.output_to_frame(&y))
    }

    fn spatial_factor(&self) -> usize {
        self.cfg.downsample_factor()
    }
}

/// Build an `f32` model and report its parameter count (spec surface).
pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<UNet<f32>> {
    UNet::build(cfg, seed)
}

#[allow(unused_imports)]
use ndarray::Axis as _Unused;
