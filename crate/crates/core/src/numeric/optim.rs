//! Adam with gradient accumulation.

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Mini-batches whose gradients are averaged into one update.
    pub accumulation: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            accumulation: 4,
        }
    }
}

/// Adam state for one [`ParamStore`].
///
/// Gradients are summed into the store over `accumulation` mini-batches; the
/// update divides by the number of accumulated batches so the step size does
/// not depend on the accumulation count.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    pending: usize,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if config.accumulation == 0 {
            return Err(Error::Optimizer("accumulation must be >= 1".into()));
        }
        let moments = store
            .iter()
            .map(|(_, p)| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .collect();
        Ok(Self {
            config,
            step: 0,
            pending: 0,
            moments,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn pending_batches(&self) -> usize {
        self.pending
    }

    /// Marks one mini-batch of gradients as accumulated. Applies the update
    /// and returns `true` once `accumulation` batches are pending.
    pub fn finish_batch(&mut self, store: &mut ParamStore) -> Result<bool> {
        self.pending += 1;
        if self.pending >= self.config.accumulation {
            self.step(store)?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Applies one bias-corrected Adam update from the accumulated gradients,
    /// then zeroes them. Frozen and untrainable parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.pending == 0 {
            return Err(Error::Optimizer("step called with zero accumulated batches".into()));
        }
        if self.moments.len() != store.len() {
            return Err(Error::Optimizer("parameter store changed since optimizer creation".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        self.step += 1;
        let scale = 1.0 / self.pending as f64;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (p, (m, v)) in store.iter_mut().zip(&mut self.moments) {
            if !p.receives_grad() {
                continue;
            }
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i] * scale;
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        self.pending = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::param::ParamGroup;

    fn store(values: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[3], values), ParamGroup::Integration).unwrap();
        s.get_mut(id).grad = Tensor::full(&[3], grad);
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(0.5, 1.0);
        let mut adam = Adam::new(AdamConfig { accumulation: 1, ..Default::default() }, &s).unwrap();
        assert!(adam.finish_batch(&mut s).unwrap());
        let id = s.id("w").unwrap();
        for &v in s.value(id).data() {
            // m_hat = v_hat = 1, so the step is lr / (1 + eps)
            assert!((0.5 - v - 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        }
        assert!(s.get(id).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn accumulation_averages_batches() {
        let mut s = store(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        for _ in 0..3 {
            assert!(!adam.finish_batch(&mut s).unwrap());
            let id = s.id("w").unwrap();
            s.get_mut(id).grad.add_assign(&Tensor::full(&[3], 1.0));
        }
        // four batches each contributing grad 1 average to 1: same step as a single batch
        assert!(adam.finish_batch(&mut s).unwrap());
        let id = s.id("w").unwrap();
        assert!((s.value(id).data()[0] + 0.001).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = store(0.25, 0.0);
        let mut adam = Adam::new(AdamConfig { accumulation: 1, ..Default::default() }, &s).unwrap();
        adam.finish_batch(&mut s).unwrap();
        let id = s.id("w").unwrap();
        assert!(s.value(id).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn frozen_parameter_unchanged() {
        let mut s = store(0.25, 3.0);
        let id = s.id("w").unwrap();
        s.get_mut(id).frozen = true;
        let mut adam = Adam::new(AdamConfig { accumulation: 1, ..Default::default() }, &s).unwrap();
        adam.finish_batch(&mut s).unwrap();
        assert!(s.value(id).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn step_without_batches_is_an_error() {
        let mut s = store(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s).unwrap();
        assert!(matches!(adam.step(&mut s), Err(Error::Optimizer(_))));
    }
}
