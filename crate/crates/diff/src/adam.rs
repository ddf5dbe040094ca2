use crate::error::{DiffError, Result};
use crate::params::{Gradients, ParameterStore};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter names.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: ParameterStore<T>,
    pub v: ParameterStore<T>,
    /// Number of completed steps.
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParameterStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Applies one update to every parameter that has a gradient. The whole
    /// step is rejected if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParameterStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Result<()> {
        if let Err(name) = grads.all_finite() {
            return Err(DiffError::NonFiniteGradient(name));
        }
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(DiffError::Shape {
                    op: "adam",
                    detail: format!("gradient `{name}` {:?} vs {:?}", g.shape(), p.shape()),
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(eps);
        for (name, g) in grads.iter() {
            if !self.m.contains(name) {
                let shape = g.shape().to_vec();
                self.m.insert(name.clone(), crate::Tensor::zeros(&shape));
                self.v.insert(name.clone(), crate::Tensor::zeros(&shape));
            }
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get(name)?.data();
            let p = params.get_mut(name)?.data_mut();
            for i in 0..p.len() {
                p[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
