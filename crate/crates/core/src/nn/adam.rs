//! Adam optimizer over the model's parameter visitor.

use ndarray::ArrayD;

use super::Scalar;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot<T: Scalar> {
    pub name: String,
    pub m: ArrayD<T>,
    pub v: ArrayD<T>,
}

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub slots: Vec<AdamSlot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, slots: Vec::new() }
    }

    /// One update with learning rate `lr`. `visit` must enumerate parameters
    /// in a stable order; slots are created lazily on the first step.
    pub fn step<F>(&mut self, lr: f64, mut visit: F)
    where
        F: FnMut(&mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, T>, ndarray::ArrayViewMutD<'_, T>)),
    {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let eps = super::sc::<T>(self.cfg.eps);
        let lr_t = super::sc::<T>(lr);
        let b1t = super::sc::<T>(b1);
        let b2t = super::sc::<T>(b2);
        let ib1 = super::sc::<T>(1.0 - b1);
        let ib2 = super::sc::<T>(1.0 - b2);
        let inv_bias1 = super::sc::<T>(1.0 / bias1);
        let inv_bias2 = super::sc::<T>(1.0 / bias2);

        let slots = &mut self.slots;
        let mut idx = 0usize;
        visit(&mut |name, mut value, grad| {
            if slots.len() == idx {
                slots.push(AdamSlot {
                    name: name.to_string(),
                    m: ArrayD::zeros(value.raw_dim()),
                    v: ArrayD::zeros(value.raw_dim()),
                });
            }
            let slot = &mut slots[idx];
            debug_assert_eq!(slot.name, name, "parameter order changed");
            ndarray::Zip::from(&mut slot.m).and(&grad).for_each(|m, &g| *m = b1t * *m + ib1 * g);
            ndarray::Zip::from(&mut slot.v).and(&grad).for_each(|v, &g| *v = b2t * *v + ib2 * g * g);
            ndarray::Zip::from(&mut value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let mhat = m * inv_bias1;
                    let vhat = v * inv_bias2;
                    *p = *p - lr_t * mhat / (vhat.sqrt() + eps);
                });
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayViewMutD};

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 3)^2 elementwise
        let mut p = arr1(&[0.0f64, 10.0]).into_dyn();
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        for _ in 0..2000 {
            let mut g = p.mapv(|x| 2.0 * (x - 3.0));
            let gv: ArrayViewMutD<'_, f64> = g.view_mut();
            let pv = p.view_mut();
            let mut pair = Some((pv, gv));
            adam.step(0.05, |f| {
                let (pv, gv) = pair.take().unwrap();
                f("p", pv, gv);
            });
        }
        assert!((p[[0]] - 3.0).abs() < 1e-3);
        assert!((p[[1]] - 3.0).abs() < 1e-3);
    }
}
