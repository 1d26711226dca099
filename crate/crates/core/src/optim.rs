//! ADAM with bias correction, and polynomial learning-rate annealing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::{s, Scalar, Tensor};

/// `lr0 * (1 - step/total)^power`, with `step` clamped to `[0, total]`.
pub fn lr_schedule(step: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = 1.0 - step.min(total) as f64 / total as f64;
    lr0 * frac.powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "adam betas must lie in [0,1) and eps > 0: {self:?}"
            )))
        }
    }
}

/// First and second moments per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &ParamSet<T>| {
            let mut z = ParamSet::new();
            for (k, v) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(v.shape().to_vec()));
            }
            z
        };
        Adam {
            config,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    /// One bias-corrected step on every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2): (T, T) = (s(beta1), s(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step: T = s(lr / bc1);
        let inv_sqrt_bc2: T = s(1.0 / bc2.sqrt());
        let eps_t: T = s(eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", format!("`{name}`: param {:?} grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi = *pi - step * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps_t);
            }
        }
        Ok(())
    }
}
