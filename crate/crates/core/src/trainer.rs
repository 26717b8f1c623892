//! Training loops for the base and shared base+cascade models.
//!
//! The cascade model is trained with whole-image conditioning dropout: with
//! probability `dropout_p` the upsampled low-resolution intermediate is
//! replaced by exact zeros, which is also how base-mode inference works, so
//! one checkpoint serves every cascade stage. A regression mode trains the
//! same network as a single-pass predictor.

use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::cascade::upsample2x;
use crate::data::{augment_item, AugmentConfig, TrainItem};
use crate::error::{Error, Result};
use crate::frame::{Frame, CHANNELS};
use crate::metrics::psnr;
use crate::model::{Checkpoint, ConditionSet, ModelConfig, UNet};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::Scalar;
use crate::schedule::{derive_seed, forward_noise, sample_averaged, v_target, StepSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    Base,
    Cascade,
    Regression,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(TrainMode::Base),
            "cascade" => Ok(TrainMode::Cascade),
            "regression" => Ok(TrainMode::Regression),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected base|cascade|regression)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Base => "base",
            TrainMode::Cascade => "cascade",
            TrainMode::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub dropout_p: f64,
    pub mode: TrainMode,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Steps between checkpoint files in [`Trainer::fit`] (0 = final only).
    pub checkpoint_every: u64,
    /// Steps between validation PSNR probes (0 = never).
    pub val_every: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 1e-4,
            warmup_steps: 1000,
            total_steps: 10_000,
            dropout_p: 0.5,
            mode,
            seed: 0,
            augment: match mode {
                TrainMode::Cascade => AugmentConfig::toy_cascade(),
                _ => AugmentConfig::toy_base(),
            },
            checkpoint_every: 0,
            val_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1]", self.dropout_p)));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Linear warmup: `lr * step / warmup` below `warmup`, constant afterwards.
pub fn warmup_lr(base_lr: f64, step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else {
        base_lr
    }
}

/// Whole-image conditioning dropout decision.
pub fn draw_condition_dropout<R: Rng>(rng: &mut R, dropout_p: f64) -> bool {
    rng.random::<f64>() < dropout_p
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStepStats {
    pub loss: f64,
    pub dropped_conditions: usize,
    pub batch_size: usize,
}

pub struct Trainer {
    pub model: UNet<f32>,
    pub adam: Adam<f32>,
    pub cfg: TrainConfig,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: UNet<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { model, adam: Adam::new(AdamConfig::default()), cfg, step: 0, rng })
    }

    /// Resume bit-exactly from a checkpoint (parameters, optimizer moments,
    /// step counter, and rng position).
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.restore_model()?;
        let adam = ckpt.restore_adam().unwrap_or_else(|| Adam::new(AdamConfig::default()));
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        Ok(Trainer { model, adam, cfg, step: ckpt.train_step, rng })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.step, self.cfg.seed, self.rng.get_word_pos())
            .with_adam(&self.adam)
    }

    /// Draw and augment one batch from the pool (consumes trainer rng).
    pub fn sample_batch(&mut self, pool: &[TrainItem]) -> Result<Vec<TrainItem>> {
        if pool.is_empty() {
            return Err(Error::Dataset("empty training pool".into()));
        }
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.random_range(0..pool.len());
            batch.push(augment_item(&pool[idx], &self.cfg.augment, &mut self.rng)?);
        }
        Ok(batch)
    }

    /// One optimizer update on an already-augmented batch.
    ///
    /// Per item: `t ~ U[0,1]`, unit noise, a conditioning set whose low-res
    /// channel is zeroed with probability `dropout_p` (cascade mode), the L1
    /// velocity loss, and one Adam step at the warmup-scaled rate.
    pub fn train_step(&mut self, batch: &[TrainItem]) -> Result<TrainStepStats> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Dataset("empty batch".into()));
        }
        let (h, w) = batch[0].triplet.hw();
        let mut x = Array4::<f32>::zeros((n, self.model.cfg.input_channels, h, w));
        let mut times = Array1::<f32>::zeros(n);
        let mut target = Array4::<f32>::zeros((n, CHANNELS, h, w));
        let mut dropped = 0usize;

        for (i, item) in batch.iter().enumerate() {
            let t = &item.triplet;
            t.i0.ensure_same_shape(&t.i1, "batch frames")?;
            if t.hw() != (h, w) {
                return Err(Error::ShapeMismatch("batch items differ in size".into()));
            }
            let c_low = match self.cfg.mode {
                TrainMode::Base | TrainMode::Regression => Frame::zeros(h, w),
                TrainMode::Cascade => {
                    let lowres = item.lowres.as_ref().ok_or_else(|| {
                        Error::Dataset(format!(
                            "cascade training requires a precomputed lowres intermediate ({})",
                            t.source_id
                        ))
                    })?;
                    let up = upsample2x(lowres);
                    t.i0.ensure_same_shape(&up, "upsampled lowres")?;
                    if draw_condition_dropout(&mut self.rng, self.cfg.dropout_p) {
                        dropped += 1;
                        Frame::zeros(h, w)
                    } else {
                        up
                    }
                }
            };

            let (time, z, tgt) = match self.cfg.mode {
                TrainMode::Regression => (0.0f32, Frame::zeros(h, w), t.i1.clone()),
                _ => {
                    let time: f64 = self.rng.random();
                    let time = time as f32;
                    let eps = Frame::standard_normal(h, w, &mut self.rng);
                    let z = forward_noise(&t.i1, &eps, time)?;
                    let v = v_target(&t.i1, &eps, time)?;
                    (time, z, v)
                }
            };

            times[i] = time;
            for (slot, frame) in [&z, &t.i0, &t.i2, &c_low].iter().enumerate() {
                x.slice_mut(ndarray::s![i, slot * CHANNELS..(slot + 1) * CHANNELS, .., ..])
                    .assign(&frame.data().view());
            }
            target.slice_mut(ndarray::s![i, .., .., ..]).assign(&tgt.data().view());
        }

        self.model.zero_grad();
        let (y, ctx) = self.model.forward(&x, &times, true)?;
        let count = y.len() as f64;
        let loss: f64 =
            y.iter().zip(target.iter()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / count;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite at step {}", self.step)));
        }
        let inv = (1.0 / count) as f32;
        let mut dy = y;
        dy.zip_mut_with(&target, |d, &t| *d = (*d - t).signum() * inv);
        self.model.backward(&ctx.expect("tape requested"), &dy);

        let lr = warmup_lr(self.cfg.lr, self.step, self.cfg.warmup_steps);
        let model = &mut self.model;
        self.adam.step(lr, |f| model.visit_params_mut(f));
        self.step += 1;
        Ok(TrainStepStats { loss, dropped_conditions: dropped, batch_size: n })
    }

    /// Mean validation PSNR with a cheap deterministic sampler (or a single
    /// regression pass). Does not consume the trainer rng.
    pub fn validation_psnr(&self, val: &[TrainItem]) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::Dataset("empty validation pool".into()));
        }
        let steps = StepSchedule::uniform(2)?;
        let mut total = 0.0;
        for (idx, item) in val.iter().enumerate() {
            let t = &item.triplet;
            let (h, w) = t.hw();
            let c_low = match (self.cfg.mode, &item.lowres) {
                (TrainMode::Cascade, Some(lowres)) => upsample2x(lowres),
                _ => Frame::zeros(h, w),
            };
            let cond = ConditionSet::new(t.i0.clone(), t.i2.clone(), c_low)?;
            let pred = match self.cfg.mode {
                TrainMode::Regression => self.model.regress(&cond)?,
                _ => sample_averaged(
                    &self.model,
                    &cond,
                    (h, w),
                    &steps,
                    1,
                    derive_seed(0x56414C, idx as u64),
                )?,
            };
            total += psnr(&pred, &t.i1)?;
        }
        Ok(total / val.len() as f64)
    }

    /// Run the full training loop: `total_steps` updates with periodic
    /// checkpointing and validation logging. Aborts on a non-finite loss.
    /// Returns the final checkpoint (also written to `out_dir` when given).
    pub fn fit(
        &mut self,
        train: &[TrainItem],
        val: &[TrainItem],
        out_dir: Option<&Path>,
    ) -> Result<Checkpoint> {
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(dir.join("train_log.tsv"))?)
            }
            None => None,
        };
        while self.step < self.cfg.total_steps {
            let batch = self.sample_batch(train)?;
            let stats = self.train_step(&batch)?;
            let lr = warmup_lr(self.cfg.lr, self.step - 1, self.cfg.warmup_steps);

            let val_psnr = if self.cfg.val_every > 0
                && !val.is_empty()
                && (self.step % self.cfg.val_every == 0 || self.step == self.cfg.total_steps)
            {
                Some(self.validation_psnr(val)?)
            } else {
                None
            };

            if let Some(f) = log_file.as_mut() {
                let mut line = format!("{}\t{:.6}\t{:.6e}", self.step, stats.loss, lr);
                match val_psnr {
                    Some(p) => write!(line, "\t{p:.3}").unwrap(),
                    None => line.push_str("\t-"),
                }
                writeln!(f, "{line}")?;
            }
            if let Some(p) = val_psnr {
                log::info!("step {} loss {:.4} val_psnr {:.2}", self.step, stats.loss, p);
            }

            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = out_dir {
                    self.checkpoint().save(&dir.join(format!("step_{:07}.ckpt", self.step)))?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join("final.ckpt"))?;
        }
        Ok(ckpt)
    }
}

/// Convenience wrapper matching the spec surface: build a trainer, run the
/// loop, return the final checkpoint.
pub fn fit(
    model: UNet<f32>,
    train: &[TrainItem],
    val: &[TrainItem],
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    Trainer::new(model, cfg)?.fit(train, val, out_dir)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare the hand-written backward pass against central finite differences
/// of the L1 velocity loss on an `f64` twin of the model (same generic code
/// path as production, evaluated in double precision so the difference
/// quotient is trustworthy).
pub fn gradient_check(cfg: &ModelConfig, seed: u64, num_params: usize) -> Result<GradCheckReport> {
    let mut model = UNet::<f64>::build(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let s = cfg.downsample_factor() * 2;
    let (h, w) = (s.max(8), s.max(8));
    let x = Array4::from_shape_fn((2, cfg.input_channels, h, w), |_| rng.random::<f64>() - 0.5);
    let t = Array1::from_vec(vec![0.3, 0.8]);
    let target =
        Array4::from_shape_fn((2, cfg.output_channels, h, w), |_| rng.random::<f64>() - 0.5);
    let n = target.len() as f64;

    model.zero_grad();
    let (y, ctx) = model.forward(&x, &t, true)?;
    let dy = (&y - &target).mapv(|d| d.signum() / n);
    model.backward(&ctx.expect("tape"), &dy);

    let mut grads: Vec<(String, usize, f64)> = Vec::new();
    model.visit_params_mut(&mut |name, _v, g| {
        for (i, &gv) in g.iter().enumerate() {
            grads.push((name.to_string(), i, gv));
        }
    });
    let candidates: Vec<_> = grads.iter().filter(|(_, _, g)| g.abs() > 1e-6).cloned().collect();
    if candidates.len() < num_params {
        return Err(Error::Numeric(format!(
            "only {} non-trivial gradients available",
            candidates.len()
        )));
    }
    let stride = candidates.len() / num_params;
    let picked: Vec<_> = candidates.into_iter().step_by(stride.max(1)).take(num_params).collect();

    let h_fd = 1e-6;
    let mut max_rel: f64 = 0.0;
    for (name, flat_idx, g) in &picked {
        let nudge = |delta: f64, m: &mut UNet<f64>| {
            m.visit_params_mut(&mut |n, mut v, _| {
                if n == name {
                    v.as_slice_mut().expect("standard layout")[*flat_idx] += delta;
                }
            });
        };
        nudge(h_fd, &mut model);
        let (yp, _) = model.forward(&x, &t, false)?;
        let lp = (&yp - &target).mapv(f64::abs).sum() / n;
        nudge(-2.0 * h_fd, &mut model);
        let (ym, _) = model.forward(&x, &t, false)?;
        let lm = (&ym - &target).mapv(f64::abs).sum() / n;
        nudge(h_fd, &mut model);
        let fd = (lp - lm) / (2.0 * h_fd);
        let rel = (fd - g).abs() / g.abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { checked: picked.len(), max_rel_err: max_rel })
}

#[allow(dead_code)]
fn _assert_scalar_bounds<T: Scalar>() {}

#[cfg(test)]
mod tests;
