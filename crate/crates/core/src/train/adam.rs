//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one network, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let c1 = (1.0 - (beta1 as f64).powi(t)) as f32;
        let c2 = (1.0 - (beta2 as f64).powi(t)) as f32;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new([values.len()], values).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        s.accumulate_grad(crate::params::ParamId(0), &[3.0, -0.01, 40.0]);
        adam.step(&mut s).unwrap();
        let after = s.get(crate::params::ParamId(0)).value.to_vec();
        for (a, (b, g)) in after.iter().zip([(1.0f32, 3.0f32), (-2.0, -0.01), (0.5, 40.0)]) {
            let expect = b - 2e-4 * g.signum();
            assert!((a - expect).abs() < 1e-7, "{a} vs {expect}");
        }
        assert!(s.iter().all(|p| p.grad.is_none()));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(vec![1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..3 {
            s.accumulate_grad(crate::params::ParamId(0), &[0.0, 0.0]);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get(crate::params::ParamId(0)).value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let err = adam.step(&mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
        assert_eq!(adam.t, 0);
    }
}
