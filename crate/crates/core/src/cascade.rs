//! Patch-based self-cascaded inference.
//!
//! A single shared denoiser serves every pyramid level. The coarsest level
//! predicts the middle frame from downsampled inputs with a zero
//! low-resolution condition; each finer level upsamples the previous
//! prediction 2x bilinearly and refines it by denoising overlapping
//! fixed-size patches, merging the patch latents into one full-resolution
//! latent after every denoising step (uniform-weight averaging). The
//! denoiser therefore never sees a tensor larger than one patch, no matter
//! the output resolution.
//!
//! Noise handling: each sample initializes one full-resolution latent and
//! crops it per patch, so overlapping patches see identical noise and merge
//! seamlessly. Patch results are reduced in placement order, which keeps
//! outputs bitwise reproducible under any threading.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::exec;
use crate::frame::{mean_frames, Frame, CHANNELS};
use crate::model::{ConditionSet, Denoiser};
use crate::schedule::{derive_seed, sample_averaged, sampler_step, DiffusionState, StepSchedule};

/// Deterministic placement of overlapping patches covering an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_size: (usize, usize),
    pub patch_size: (usize, usize),
    /// Top-left offsets, row-major.
    pub placements: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// `(patch area * patch count) / image area`; 1.0 means exact tiling.
    pub fn overlap_ratio(&self) -> f64 {
        let (h, w) = self.patch_size;
        let (ih, iw) = self.image_size;
        (h * w * self.placements.len()) as f64 / (ih * iw) as f64
    }

    /// True when the union of patches touches every pixel.
    pub fn covers_all_pixels(&self) -> bool {
        let (ih, iw) = self.image_size;
        let (ph, pw) = self.patch_size;
        let mut mask = Array2::<bool>::from_elem((ih, iw), false);
        for &(y, x) in &self.placements {
            mask.slice_mut(ndarray::s![y..y + ph, x..x + pw]).fill(true);
        }
        mask.iter().all(|&m| m)
    }
}

/// Minimal equally-distributed overlapping placement: `ceil(H/h) x ceil(W/w)`
/// patches with offsets spread evenly between 0 and the last valid position.
/// A patch larger than the image is shrunk to the image (single patch).
pub fn plan_grid(image_size: (usize, usize), patch_size: (usize, usize)) -> Result<PatchGrid> {
    let (ih, iw) = image_size;
    if ih == 0 || iw == 0 {
        return Err(Error::Domain("empty image".into()));
    }
    let (mut ph, mut pw) = patch_size;
    if ph == 0 || pw == 0 {
        return Err(Error::Domain("empty patch".into()));
    }
    if ph > ih || pw > iw {
        log::warn!(
            "patch {}x{} larger than image {}x{}; shrinking to a single patch",
            ph, pw, ih, iw
        );
        ph = ph.min(ih);
        pw = pw.min(iw);
    }
    let rows = ih.div_ceil(ph);
    let cols = iw.div_ceil(pw);
    let offsets = |count: usize, image: usize, patch: usize| -> Vec<usize> {
        if count == 1 {
            return vec![0];
        }
        let span = (image - patch) as f64 / (count - 1) as f64;
        (0..count).map(|i| (i as f64 * span).round() as usize).collect()
    };
    let ys = offsets(rows, ih, ph);
    let xs = offsets(cols, iw, pw);
    let mut placements = Vec::with_capacity(rows * cols);
    for &y in &ys {
        for &x in &xs {
            placements.push((y, x));
        }
    }
    Ok(PatchGrid { image_size, patch_size: (ph, pw), placements })
}

/// Box (area-average) reduction by a power-of-two factor. Inputs that do not
/// divide evenly are edge-replicated up to the next multiple first, so the
/// output has `ceil(dim / factor)` pixels per axis.
pub fn downsample(img: &Frame, factor: usize) -> Result<Frame> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Domain(format!("downsample factor {factor} is not a power of two")));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w) = img.hw();
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let padded = img.pad_replicate(oh * factor, ow * factor)?;
    let inv = 1.0 / (factor * factor) as f32;
    let mut out = Array3::zeros((CHANNELS, oh, ow));
    for c in 0..CHANNELS {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += padded.data()[(c, y * factor + dy, x * factor + dx)];
                    }
                }
                out[(c, y, x)] = acc * inv;
            }
        }
    }
    Frame::new(out)
}

/// Bilinear 2x upsampling with half-pixel center alignment.
pub fn upsample2x(img: &Frame) -> Frame {
    let (h, w) = img.hw();
    img.resize_bilinear(2 * h, 2 * w)
}

/// Full-resolution-at-scale latent with patch accumulation buffers.
#[derive(Debug, Clone)]
pub struct LevelState {
    pub scale_level: usize,
    pub latent: Frame,
    value_sum: Array3<f32>,
    weight_sum: Array2<f32>,
}

impl LevelState {
    pub fn new(scale_level: usize, latent: Frame) -> Self {
        let (h, w) = latent.hw();
        LevelState {
            scale_level,
            latent,
            value_sum: Array3::zeros((CHANNELS, h, w)),
            weight_sum: Array2::zeros((h, w)),
        }
    }
}

/// Merge patch updates into the level's latent by per-pixel uniform-weight
/// averaging. Every pixel must be covered by at least one patch.
pub fn merge_patches(
    state: &mut LevelState,
    updates: &[((usize, usize), Frame)],
) -> Result<Frame> {
    let (h, w) = state.latent.hw();
    state.value_sum.fill(0.0);
    state.weight_sum.fill(0.0);
    for ((y, x), patch) in updates {
        let (ph, pw) = patch.hw();
        if y + ph > h || x + pw > w {
            return Err(Error::Domain(format!(
                "patch at ({y},{x}) size {ph}x{pw} outside level {h}x{w}"
            )));
        }
        let mut dst = state
            .value_sum
            .slice_mut(ndarray::s![.., *y..y + ph, *x..x + pw]);
        dst.zip_mut_with(&patch.data().view(), |d, &s| *d += s);
        state
            .weight_sum
            .slice_mut(ndarray::s![*y..y + ph, *x..x + pw])
            .mapv_inplace(|v| v + 1.0);
    }
    if state.weight_sum.iter().any(|&c| c == 0.0) {
        return Err(Error::Domain("patch grid leaves uncovered pixels".into()));
    }
    let mut merged = Array3::zeros((CHANNELS, h, w));
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                merged[(c, y, x)] = state.value_sum[(c, y, x)] / state.weight_sum[(y, x)];
            }
        }
    }
    let merged = Frame::new(merged)?;
    state.latent = merged.clone();
    Ok(merged)
}

/// Inference knobs for one cascade run.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CascadeConfig {
    pub num_levels: usize,
    pub patch_size: (usize, usize),
    pub steps_per_level: usize,
    pub num_samples: usize,
    pub rng_seed: u64,
}

impl CascadeConfig {
    /// The reference inference setup: 3 levels, 512x768 patches, 4 samples
    /// averaged, 4 sampling steps.
    pub fn reference(rng_seed: u64) -> Self {
        CascadeConfig {
            num_levels: 3,
            patch_size: (512, 768),
            steps_per_level: 4,
            num_samples: 4,
            rng_seed,
        }
    }

    pub fn validate(&self, model_factor: usize) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::Config("cascade needs at least one level".into()));
        }
        if self.steps_per_level == 0 || self.num_samples == 0 {
            return Err(Error::Config("steps and samples must be positive".into()));
        }
        if self.patch_size.0 % model_factor != 0 || self.patch_size.1 % model_factor != 0 {
            return Err(Error::Config(format!(
                "patch size {:?} not divisible by the model factor {model_factor}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Activation-size instrumentation shared across threads.
#[derive(Debug, Default)]
pub struct ActivationProbe {
    max_patch_area: AtomicUsize,
    full_buffer_bytes: AtomicUsize,
}

impl ActivationProbe {
    pub fn record_denoiser_input(&self, area: usize) {
        self.max_patch_area.fetch_max(area, Ordering::Relaxed);
    }

    pub fn record_full_buffers(&self, bytes: usize) {
        self.full_buffer_bytes.fetch_max(bytes, Ordering::Relaxed);
    }

    /// Largest spatial area (pixels) ever passed to the denoiser.
    pub fn max_patch_area(&self) -> usize {
        self.max_patch_area.load(Ordering::Relaxed)
    }

    /// Largest full-resolution buffer footprint (bytes) held by any level.
    pub fn full_buffer_bytes(&self) -> usize {
        self.full_buffer_bytes.load(Ordering::Relaxed)
    }
}

/// Wraps a denoiser and records every input's spatial area.
pub struct InstrumentedDenoiser<'a> {
    inner: &'a dyn Denoiser,
    probe: &'a ActivationProbe,
}

impl<'a> InstrumentedDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser, probe: &'a ActivationProbe) -> Self {
        InstrumentedDenoiser { inner, probe }
    }
}

impl Denoiser for InstrumentedDenoiser<'_> {
    fn denoise(&self, z: &Frame, t: f32, cond: &ConditionSet) -> Result<Frame> {
        self.probe.record_denoiser_input(z.height() * z.width());
        self.inner.denoise(z, t, cond)
    }
    fn spatial_factor(&self) -> usize {
        self.inner.spatial_factor()
    }
}

/// Run `f` with a fresh probe and return `(max_patch_area, full_buffer_bytes)`
/// alongside the closure result.
pub fn measure_activation_peak<T>(
    f: impl FnOnce(&ActivationProbe) -> Result<T>,
) -> Result<(usize, usize, T)> {
    let probe = ActivationProbe::default();
    let value = f(&probe)?;
    Ok((probe.max_patch_area(), probe.full_buffer_bytes(), value))
}

/// Coarsest-level prediction: whole-image sampling with a zero
/// low-resolution condition, averaged over `num_samples` noise seeds.
pub fn base_predict(
    denoiser: &dyn Denoiser,
    i0_s: &Frame,
    i2_s: &Frame,
    cfg: &CascadeConfig,
) -> Result<Frame> {
    base_predict_probed(denoiser, i0_s, i2_s, cfg, None)
}

pub fn base_predict_probed(
    denoiser: &dyn Denoiser,
    i0_s: &Frame,
    i2_s: &Frame,
    cfg: &CascadeConfig,
    probe: Option<&ActivationProbe>,
) -> Result<Frame> {
    i0_s.ensure_same_shape(i2_s, "base inputs")?;
    let (h, w) = i0_s.hw();
    let cond = ConditionSet::base(i0_s.clone(), i2_s.clone())?;
    let steps = StepSchedule::uniform(cfg.steps_per_level)?;
    if let Some(probe) = probe {
        probe.record_full_buffers(frame_bytes(h, w) * (4 + cfg.num_samples));
        let instrumented = InstrumentedDenoiser::new(denoiser, probe);
        sample_averaged(&instrumented, &cond, (h, w), &steps, cfg.num_samples, cfg.rng_seed)
    } else {
        sample_averaged(denoiser, &cond, (h, w), &steps, cfg.num_samples, cfg.rng_seed)
    }
}

/// One cascade refinement level.
///
/// Maintains a full-resolution latent per sample; each denoising step crops
/// latent/conditioning patches on the grid, advances every patch with
/// [`sampler_step`], and merges the post-step patch latents back into the
/// full latent. Samples are averaged in pixel space.
pub fn cascade_level(
    denoiser: &dyn Denoiser,
    i0_s: &Frame,
    i2_s: &Frame,
    c_low: &Frame,
    cfg: &CascadeConfig,
    level_seed: u64,
) -> Result<Frame> {
    cascade_level_probed(denoiser, i0_s, i2_s, c_low, cfg, level_seed, None)
}

pub fn cascade_level_probed(
    denoiser: &dyn Denoiser,
    i0_s: &Frame,
    i2_s: &Frame,
    c_low: &Frame,
    cfg: &CascadeConfig,
    level_seed: u64,
    probe: Option<&ActivationProbe>,
) -> Result<Frame> {
    i0_s.ensure_same_shape(i2_s, "cascade inputs")?;
    i0_s.ensure_same_shape(c_low, "cascade condition")?;
    let (h, w) = i0_s.hw();
    let grid = plan_grid((h, w), cfg.patch_size)?;
    let steps = StepSchedule::uniform(cfg.steps_per_level)?;
    let (ph, pw) = grid.patch_size;

    if let Some(probe) = probe {
        // Persistent per-level buffers: latent, value/weight accumulators,
        // three conditioning frames, per-sample results.
        let bytes = frame_bytes(h, w) * (5 + cfg.num_samples) + h * w * 4;
        probe.record_full_buffers(bytes);
    }

    let instrumented = probe.map(|p| InstrumentedDenoiser::new(denoiser, p));
    let denoiser: &dyn Denoiser = match &instrumented {
        Some(d) => d,
        None => denoiser,
    };

    let mut samples = Vec::with_capacity(cfg.num_samples);
    for s in 0..cfg.num_samples {
        let sample_seed = derive_seed(level_seed, s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut state = LevelState::new(0, Frame::standard_normal(h, w, &mut rng));
        let times = steps.times();
        for k in 0..times.len() - 1 {
            let t = times[k];
            let t_next = times[k + 1];
            let jobs: Vec<(usize, usize)> = grid.placements.clone();
            let latent = &state.latent;
            let updates = exec::map_jobs(jobs, |(y, x)| -> Result<((usize, usize), Frame)> {
                let z_patch = latent.crop(y, x, ph, pw)?;
                let cond = ConditionSet::new(
                    i0_s.crop(y, x, ph, pw)?,
                    i2_s.crop(y, x, ph, pw)?,
                    c_low.crop(y, x, ph, pw)?,
                )?;
                let v_hat = denoiser.denoise(&z_patch, t, &cond)?;
                let next = sampler_step(&DiffusionState { z: z_patch, t }, &v_hat, t_next)?;
                Ok(((y, x), next.z))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            merge_patches(&mut state, &updates)?;
        }
        samples.push(state.latent);
    }
    mean_frames(&samples)
}

/// Full coarse-to-fine interpolation of the middle frame.
///
/// Inputs are edge-replicated up to a multiple of
/// `2^(levels-1) * model_factor`, downsampled to the coarsest scale for the
/// base prediction, then refined level by level; the final prediction is
/// cropped back to the input size.
pub fn interpolate(
    denoiser: &dyn Denoiser,
    i0: &Frame,
    i2: &Frame,
    cfg: &CascadeConfig,
) -> Result<Frame> {
    interpolate_probed(denoiser, i0, i2, cfg, None)
}

pub fn interpolate_probed(
    denoiser: &dyn Denoiser,
    i0: &Frame,
    i2: &Frame,
    cfg: &CascadeConfig,
    probe: Option<&ActivationProbe>,
) -> Result<Frame> {
    i0.ensure_same_shape(i2, "interpolation inputs")?;
    let model_factor = denoiser.spatial_factor();
    cfg.validate(model_factor)?;
    let (h, w) = i0.hw();
    let unit = (1usize << (cfg.num_levels - 1)) * model_factor;
    let hp = h.div_ceil(unit) * unit;
    let wp = w.div_ceil(unit) * unit;
    let i0p = i0.pad_replicate(hp, wp)?;
    let i2p = i2.pad_replicate(hp, wp)?;

    let coarse_factor = 1usize << (cfg.num_levels - 1);
    let mut prediction = base_predict_probed(
        denoiser,
        &downsample(&i0p, coarse_factor)?,
        &downsample(&i2p, coarse_factor)?,
        cfg,
        probe,
    )?;

    for level in (0..cfg.num_levels - 1).rev() {
        let factor = 1usize << level;
        let i0_s = downsample(&i0p, factor)?;
        let i2_s = downsample(&i2p, factor)?;
        let c_low = upsample2x(&prediction);
        let level_seed = derive_seed(cfg.rng_seed, 1 + level as u64);
        prediction =
            cascade_level_probed(denoiser, &i0_s, &i2_s, &c_low, cfg, level_seed, probe)?;
    }

    if (hp, wp) != (h, w) {
        prediction = prediction.crop(0, 0, h, w)?;
    }
    Ok(prediction)
}

/// Recursive bisection: interpolate the middle frame, then each half, until
/// `count` frames at times `i / (count + 1)` are produced. `count` must be
/// `2^k - 1`.
pub fn interpolate_recursive(
    denoiser: &dyn Denoiser,
    i0: &Frame,
    i_end: &Frame,
    count: usize,
    cfg: &CascadeConfig,
) -> Result<Vec<Frame>> {
    if count == 0 || !(count + 1).is_power_of_two() {
        return Err(Error::Domain(format!(
            "recursion count must be a power of two minus one, got {count}"
        )));
    }
    let mut out: Vec<Option<Frame>> = vec![None; count];
    bisect(denoiser, i0, i_end, 0, count + 1, cfg, &mut out)?;
    Ok(out.into_iter().map(|f| f.expect("bisection fills every slot")).collect())
}

fn bisect(
    denoiser: &dyn Denoiser,
    lo: &Frame,
    hi: &Frame,
    lo_idx: usize,
    hi_idx: usize,
    cfg: &CascadeConfig,
    out: &mut [Option<Frame>],
) -> Result<()> {
    if hi_idx - lo_idx < 2 {
        return Ok(());
    }
    let mid_idx = (lo_idx + hi_idx) / 2;
    let mut mid_cfg = cfg.clone();
    mid_cfg.rng_seed = derive_seed(cfg.rng_seed, mid_idx as u64);
    let mid = interpolate(denoiser, lo, hi, &mid_cfg)?;
    bisect(denoiser, lo, &mid, lo_idx, mid_idx, cfg, out)?;
    bisect(denoiser, &mid, hi, mid_idx, hi_idx, cfg, out)?;
    out[mid_idx - 1] = Some(mid);
    Ok(())
}

fn frame_bytes(h: usize, w: usize) -> usize {
    CHANNELS * h * w * std::mem::size_of::<f32>()
}
