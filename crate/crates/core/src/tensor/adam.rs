use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.ids().map(|id| vec![T::zero(); params.get(id).len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Restores a saved optimizer state.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Adam { config, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update from the gradients currently stored in `params`.
    ///
    /// Parameters without a gradient are treated as having a zero gradient.
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = params.grad(id) {
                if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "non-finite gradient in {}[{j}]",
                        params.name(id)
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for id in params.ids() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let tensor = params.tensor_mut(id);
            let Some(g) = tensor.grad().map(<[T]>::to_vec) else {
                // Zero gradient: moments decay, and the update stays exactly zero
                // as long as no gradient was ever seen.
                m.iter_mut().for_each(|x| *x *= b1);
                v.iter_mut().for_each(|x| *x *= b2);
                apply(tensor.data_mut(), m, v, step_size, inv_bc2_sqrt, eps);
                continue;
            };
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            apply(tensor.data_mut(), m, v, step_size, inv_bc2_sqrt, eps);
        }
        Ok(())
    }
}

fn apply<T: Real>(p: &mut [T], m: &[T], v: &[T], step_size: T, inv_bc2_sqrt: T, eps: T) {
    for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
        *pi -= step_size * mi / (vi.sqrt() * inv_bc2_sqrt + eps);
    }
}
