//! Reference denoisers with closed-form behavior.
//!
//! An oracle denoiser knows the clean target and answers with the exact
//! velocity `v = (alpha_t * z - x) / sigma_t`, which makes the recovered
//! estimate `x_hat = alpha_t * z - sigma_t * v` equal to the target at every
//! step. Sampling with an oracle must reproduce the target regardless of the
//! step count or patch geometry, which turns the whole inference stack into
//! a testable fixed point.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::model::{ConditionSet, Denoiser};
use crate::schedule::schedule_eval;

/// Denoiser that knows the clean target for each spatial resolution.
///
/// Pyramid inference queries the same denoiser at several scales; targets
/// are matched by frame size.
pub struct OracleDenoiser {
    targets: Vec<Frame>,
}

impl OracleDenoiser {
    pub fn new(target: Frame) -> Self {
        OracleDenoiser { targets: vec![target] }
    }

    pub fn with_targets(targets: Vec<Frame>) -> Self {
        OracleDenoiser { targets }
    }

    fn target_for(&self, hw: (usize, usize)) -> Result<&Frame> {
        self.targets
            .iter()
            .find(|t| t.hw() == hw)
            .ok_or_else(|| Error::Domain(format!("oracle has no target of size {hw:?}")))
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, z: &Frame, t: f32, _cond: &ConditionSet) -> Result<Frame> {
        let target = self.target_for(z.hw())?;
        oracle_v(z, t, target)
    }
}

/// `v = (alpha_t * z - x) / sigma_t` for a known target `x`.
pub fn oracle_v(z: &Frame, t: f32, target: &Frame) -> Result<Frame> {
    let (alpha, sigma) = schedule_eval(t)?;
    if sigma == 0.0 {
        return Err(Error::Domain("oracle velocity undefined at t = 0".into()));
    }
    z.affine_combine(alpha / sigma, target, -1.0 / sigma)
}

/// Oracle whose clean target is a pointwise function of the conditioning
/// patch. Because the target is recomputed from whatever crop the cascade
/// hands over, this oracle answers correctly for any patch geometry, which
/// makes it the instrument for grid-independence tests.
pub struct CondOracleDenoiser<F>
where
    F: Fn(&ConditionSet) -> Frame + Sync,
{
    target_fn: F,
}

impl<F> CondOracleDenoiser<F>
where
    F: Fn(&ConditionSet) -> Frame + Sync,
{
    pub fn new(target_fn: F) -> Self {
        CondOracleDenoiser { target_fn }
    }
}

impl<F> Denoiser for CondOracleDenoiser<F>
where
    F: Fn(&ConditionSet) -> Frame + Sync,
{
    fn denoise(&self, z: &Frame, t: f32, cond: &ConditionSet) -> Result<Frame> {
        let target = (self.target_fn)(cond);
        z.ensure_same_shape(&target, "oracle target")?;
        oracle_v(z, t, &target)
    }
}
