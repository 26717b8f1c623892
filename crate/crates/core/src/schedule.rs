//! Diffusion mathematics: the continuous noise schedule, the
//! velocity-parameterized forward/inverse maps, the L1 velocity loss, and
//! the deterministic few-step sampler.
//!
//! The schedule is the cosine schedule `alpha_t = cos(pi t / 2)`,
//! `sigma_t = sin(pi t / 2)`, which satisfies `alpha^2 + sigma^2 = 1`,
//! starts at a clean image (`t = 0`) and ends at pure noise (`t = 1`).
//!
//! Parameterization, with `x` the clean image and `eps` unit noise:
//!
//! ```text
//! z_t  = alpha_t * x   + sigma_t * eps      (forward noising)
//! v    = alpha_t * eps - sigma_t * x        (network target)
//! x    = alpha_t * z_t - sigma_t * v        (recovery)
//! eps  = sigma_t * z_t + alpha_t * v        (recovery)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::{mean_frames, Frame};
use crate::model::{ConditionSet, Denoiser};

/// Continuous cosine noise schedule.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    /// Evaluate `(alpha_t, sigma_t)`. Errors outside `[0, 1]`.
    ///
    /// The endpoints are returned exactly: `(1, 0)` at `t = 0` and `(0, 1)`
    /// at `t = 1`, so the final sampler step produces the clean estimate
    /// with no residual noise term.
    pub fn eval(self, t: f32) -> Result<(f32, f32)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("schedule time {t} outside [0, 1]")));
        }
        if t == 0.0 {
            return Ok((1.0, 0.0));
        }
        if t == 1.0 {
            return Ok((0.0, 1.0));
        }
        let phase = std::f64::consts::FRAC_PI_2 * t as f64;
        Ok((phase.cos() as f32, phase.sin() as f32))
    }
}

/// Evaluate the crate-wide schedule at `t`.
pub fn schedule_eval(t: f32) -> Result<(f32, f32)> {
    NoiseSchedule.eval(t)
}

/// `z_t = alpha_t * x + sigma_t * eps`.
pub fn forward_noise(x: &Frame, eps: &Frame, t: f32) -> Result<Frame> {
    x.ensure_same_shape(eps, "forward_noise")?;
    let (alpha, sigma) = schedule_eval(t)?;
    x.affine_combine(alpha, eps, sigma)
}

/// `v = alpha_t * eps - sigma_t * x`.
pub fn v_target(x: &Frame, eps: &Frame, t: f32) -> Result<Frame> {
    x.ensure_same_shape(eps, "v_target")?;
    let (alpha, sigma) = schedule_eval(t)?;
    eps.affine_combine(alpha, x, -sigma)
}

/// `x = alpha_t * z - sigma_t * v`, without the pixel-range clamp.
pub fn x_from_v_unclamped(z: &Frame, v_hat: &Frame, t: f32) -> Result<Frame> {
    z.ensure_same_shape(v_hat, "x_from_v")?;
    let (alpha, sigma) = schedule_eval(t)?;
    z.affine_combine(alpha, v_hat, -sigma)
}

/// `x = alpha_t * z - sigma_t * v`, clamped to the valid pixel range
/// `[-1, 1]`. Pixel-valued targets make the clamp safe and it stabilizes
/// few-step sampling.
pub fn x_from_v(z: &Frame, v_hat: &Frame, t: f32) -> Result<Frame> {
    Ok(x_from_v_unclamped(z, v_hat, t)?.clamp(-1.0, 1.0))
}

/// `eps = sigma_t * z + alpha_t * v`.
pub fn eps_from_v(z: &Frame, v_hat: &Frame, t: f32) -> Result<Frame> {
    z.ensure_same_shape(v_hat, "eps_from_v")?;
    let (alpha, sigma) = schedule_eval(t)?;
    z.affine_combine(sigma, v_hat, alpha)
}

/// Mean absolute difference over all elements.
pub fn v_loss(v_hat: &Frame, v: &Frame) -> Result<f64> {
    v_hat.ensure_same_shape(v, "v_loss")?;
    let n = v_hat.data().len() as f64;
    let sum: f64 = v_hat
        .data()
        .iter()
        .zip(v.data().iter())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(sum / n)
}

/// A noisy image together with its schedule time.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub z: Frame,
    pub t: f32,
}

/// Ordered sampling times `1 = t_0 > t_1 > ... > t_K = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    times: Vec<f32>,
}

impl StepSchedule {
    /// `steps` uniformly spaced times between 1 and 0 inclusive.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("step schedule needs at least one step".into()));
        }
        let times = (0..=steps)
            .map(|i| (steps - i) as f32 / steps as f32)
            .collect();
        Ok(StepSchedule { times })
    }

    pub fn from_times(times: Vec<f32>) -> Result<Self> {
        if times.len() < 2 || times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::Config("step schedule must run from 1 to 0".into()));
        }
        if !times.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::Config("step schedule times must be strictly decreasing".into()));
        }
        Ok(StepSchedule { times })
    }

    pub fn times(&self) -> &[f32] {
        &self.times
    }

    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// One deterministic reverse-process update from `state.t` to `t_next`.
///
/// The clean estimate is clamped to `[-1, 1]` before recombination. With
/// `t_next == state.t` and an in-range clean estimate this is the identity.
/// Errors when `t_next > state.t`.
pub fn sampler_step(state: &DiffusionState, v_hat: &Frame, t_next: f32) -> Result<DiffusionState> {
    if t_next > state.t {
        return Err(Error::Domain(format!(
            "sampler step must move toward t = 0 (got {} -> {})",
            state.t, t_next
        )));
    }
    let x_hat = x_from_v(&state.z, v_hat, state.t)?;
    let eps_hat = eps_from_v(&state.z, v_hat, state.t)?;
    let (alpha_next, sigma_next) = schedule_eval(t_next)?;
    let z_next = x_hat.affine_combine(alpha_next, &eps_hat, sigma_next)?;
    Ok(DiffusionState { z: z_next, t: t_next })
}

/// Draw one sample: start from seeded unit noise at `t = 1`, walk the step
/// schedule with [`sampler_step`], and return the clean estimate at `t = 0`.
pub fn sample(
    denoiser: &dyn Denoiser,
    cond: &ConditionSet,
    shape: (usize, usize),
    steps: &StepSchedule,
    seed: u64,
) -> Result<Frame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Frame::standard_normal(shape.0, shape.1, &mut rng);
    let mut state = DiffusionState { z, t: 1.0 };
    for &t_next in &steps.times()[1..] {
        let v_hat = denoiser.denoise(&state.z, state.t, cond)?;
        state = sampler_step(&state, &v_hat, t_next)?;
    }
    Ok(state.z)
}

/// Mean of `num_samples` independent [`sample`] runs whose seeds are derived
/// from `seed` with [`derive_seed`].
pub fn sample_averaged(
    denoiser: &dyn Denoiser,
    cond: &ConditionSet,
    shape: (usize, usize),
    steps: &StepSchedule,
    num_samples: usize,
    seed: u64,
) -> Result<Frame> {
    if num_samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    let samples = crate::exec::map_indexed(num_samples, |i| {
        sample(denoiser, cond, shape, steps, derive_seed(seed, i as u64))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    mean_frames(&samples)
}

/// Derive an independent stream seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnDenoiser;
    use crate::oracle::{oracle_v, OracleDenoiser};

    const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;

    fn frame_of(v: f32) -> Frame {
        Frame::constant(4, 4, v)
    }

    #[test]
    fn schedule_boundaries_and_midpoint() {
        assert_eq!(schedule_eval(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(schedule_eval(1.0).unwrap(), (0.0, 1.0));
        let (a, s) = schedule_eval(0.5).unwrap();
        assert!((a - 0.7071068).abs() < 1e-6);
        assert!((s - 0.7071068).abs() < 1e-6);
        assert!((a * a + s * s - 1.0).abs() < 1e-6);
        assert!(schedule_eval(-0.1).is_err());
        assert!(schedule_eval(1.1).is_err());
    }

    #[test]
    fn schedule_is_strictly_monotone() {
        let mut prev = schedule_eval(0.0).unwrap();
        for i in 1..=1000 {
            let cur = schedule_eval(i as f32 / 1000.0).unwrap();
            assert!(cur.0 < prev.0, "alpha must strictly decrease");
            assert!(cur.1 > prev.1, "sigma must strictly increase");
            prev = cur;
        }
    }

    #[test]
    fn forward_noise_examples() {
        let x = frame_of(0.5);
        let eps = frame_of(-0.25);
        assert_eq!(forward_noise(&x, &eps, 0.0).unwrap().data(), x.data());
        assert_eq!(forward_noise(&x, &eps, 1.0).unwrap().data(), eps.data());
        let z = forward_noise(&x, &eps, 0.5).unwrap();
        assert!((z.data()[(0, 0, 0)] - 0.25 * INV_SQRT2).abs() < 1e-6); // 0.1767767
        assert!(forward_noise(&x, &frame_of(0.0).crop(0, 0, 2, 2).unwrap(), 0.5).is_err());
    }

    #[test]
    fn v_target_examples() {
        let x = frame_of(0.5);
        let eps = frame_of(-0.25);
        assert_eq!(v_target(&x, &eps, 0.0).unwrap().data(), eps.data());
        let minus_x = frame_of(-0.5);
        assert_eq!(v_target(&x, &eps, 1.0).unwrap().data(), minus_x.data());
        let v = v_target(&x, &eps, 0.5).unwrap();
        assert!((v.data()[(0, 0, 0)] - (-0.75 * INV_SQRT2)).abs() < 1e-6); // -0.5303301
    }

    #[test]
    fn recovery_examples() {
        let z = frame_of(0.25 * INV_SQRT2);
        let v = frame_of(-0.75 * INV_SQRT2);
        let x = x_from_v(&z, &v, 0.5).unwrap();
        assert!((x.data()[(0, 0, 0)] - 0.5).abs() < 1e-6);
        let eps = eps_from_v(&z, &v, 0.5).unwrap();
        assert!((eps.data()[(0, 0, 0)] + 0.25).abs() < 1e-6);
        // At t = 0, x recovery returns z; at t = 1, eps recovery returns z.
        assert_eq!(x_from_v(&z, &v, 0.0).unwrap().data(), z.data());
        assert_eq!(eps_from_v(&z, &v, 1.0).unwrap().data(), z.data());
    }

    #[test]
    fn round_trips_hold_in_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..1000 {
            let t = if i == 0 { 0.0 } else { (i as f32 / 1000.0).min(1.0) };
            let x = Frame::standard_normal(4, 4, &mut rng).scale(0.5);
            let eps = Frame::standard_normal(4, 4, &mut rng);
            let z = forward_noise(&x, &eps, t).unwrap();
            let v = v_target(&x, &eps, t).unwrap();
            assert!(x_from_v_unclamped(&z, &v, t).unwrap().max_abs_diff(&x) < 1e-5);
            assert!(eps_from_v(&z, &v, t).unwrap().max_abs_diff(&eps) < 1e-5);
        }
    }

    #[test]
    fn v_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = Frame::standard_normal(6, 6, &mut rng);
        assert_eq!(v_loss(&v, &v).unwrap(), 0.0);
        let shifted = Frame::new(v.data().mapv(|x| x + 0.125)).unwrap();
        assert!((v_loss(&shifted, &v).unwrap() - 0.125).abs() < 1e-6);
        let w = Frame::standard_normal(6, 6, &mut rng);
        let brute: f64 = v
            .data()
            .iter()
            .zip(w.data().iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / v.data().len() as f64;
        assert!((v_loss(&v, &w).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn step_schedule_shapes() {
        let s = StepSchedule::uniform(4).unwrap();
        assert_eq!(s.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(StepSchedule::uniform(0).is_err());
        assert!(StepSchedule::from_times(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(StepSchedule::from_times(vec![0.9, 0.5, 0.0]).is_err());
        assert!(StepSchedule::from_times(vec![1.0, 0.5, 0.6, 0.0]).is_err());
    }

    #[test]
    fn sampler_step_identity_and_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Frame::standard_normal(4, 4, &mut rng).scale(0.4).clamp(-1.0, 1.0);
        let eps = Frame::standard_normal(4, 4, &mut rng);
        let t = 0.6;
        let z = forward_noise(&x, &eps, t).unwrap();
        let v = v_target(&x, &eps, t).unwrap();
        let state = DiffusionState { z: z.clone(), t };
        // Same-time step is the identity (clean estimate is in range).
        let same = sampler_step(&state, &v, t).unwrap();
        assert!(same.z.max_abs_diff(&z) < 1e-6);
        // Stepping backwards in the schedule is rejected.
        assert!(sampler_step(&state, &v, 0.7).is_err());
        // Stepping to t = 0 yields the clean estimate.
        let done = sampler_step(&state, &v, 0.0).unwrap();
        assert!(done.z.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn single_oracle_step_from_pure_noise_recovers_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Frame::standard_normal(4, 4, &mut rng).scale(0.4).clamp(-1.0, 1.0);
        let eps = Frame::standard_normal(4, 4, &mut rng);
        let v = v_target(&x, &eps, 1.0).unwrap();
        let state = DiffusionState { z: eps.clone(), t: 1.0 };
        let done = sampler_step(&state, &v, 0.0).unwrap();
        assert!(done.z.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn sampling_with_oracle_is_step_count_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let target = Frame::standard_normal(8, 8, &mut rng).scale(0.4).clamp(-1.0, 1.0);
        let cond = ConditionSet::base(Frame::zeros(8, 8), Frame::zeros(8, 8)).unwrap();
        let oracle = OracleDenoiser::new(target.clone());
        for k in [1usize, 2, 4, 8] {
            let steps = StepSchedule::uniform(k).unwrap();
            let out = sample(&oracle, &cond, (8, 8), &steps, 42).unwrap();
            assert!(
                out.max_abs_diff(&target) < 1e-4,
                "k={k}: {}",
                out.max_abs_diff(&target)
            );
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_seed_sensitive() {
        // A denoiser with genuine dependence on the noisy input.
        let denoiser = FnDenoiser(|z: &Frame, t: f32, _c: &ConditionSet| {
            let target = Frame::constant(8, 8, 0.3);
            let exact = oracle_v(z, t, &target)?;
            exact.affine_combine(0.8, z, 0.1)
        });
        let cond = ConditionSet::base(Frame::zeros(8, 8), Frame::zeros(8, 8)).unwrap();
        let steps = StepSchedule::uniform(3).unwrap();
        let a = sample(&denoiser, &cond, (8, 8), &steps, 1).unwrap();
        let b = sample(&denoiser, &cond, (8, 8), &steps, 1).unwrap();
        let c = sample(&denoiser, &cond, (8, 8), &steps, 2).unwrap();
        assert_eq!(a.data(), b.data(), "same seed must be bit-identical");
        assert!(a.max_abs_diff(&c) > 0.0, "different seeds should differ");
    }

    #[test]
    fn averaging_two_samples_is_mean_of_singles() {
        let denoiser = FnDenoiser(|z: &Frame, t: f32, _c: &ConditionSet| {
            let target = Frame::constant(8, 8, -0.2);
            let exact = oracle_v(z, t, &target)?;
            exact.affine_combine(0.7, z, 0.2)
        });
        let cond = ConditionSet::base(Frame::zeros(8, 8), Frame::zeros(8, 8)).unwrap();
        let steps = StepSchedule::uniform(2).unwrap();
        let avg = sample_averaged(&denoiser, &cond, (8, 8), &steps, 2, 5).unwrap();
        let s0 = sample(&denoiser, &cond, (8, 8), &steps, derive_seed(5, 0)).unwrap();
        let s1 = sample(&denoiser, &cond, (8, 8), &steps, derive_seed(5, 1)).unwrap();
        let mean = mean_frames(&[s0, s1]).unwrap();
        assert_eq!(avg.data(), mean.data());
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
