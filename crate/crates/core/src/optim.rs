//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Float, Module};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be > 0, got {}", self.lr);
        ensure!((0.0..1.0).contains(&self.beta1), Config, "beta1 must be in [0, 1), got {}", self.beta1);
        ensure!((0.0..1.0).contains(&self.beta2), Config, "beta2 must be in [0, 1), got {}", self.beta2);
        ensure!(self.eps > 0.0, Config, "eps must be > 0");
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter tensor, in the
/// module's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub steps: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, module: &mut impl Module<T>) -> Self {
        let shapes: Vec<usize> = module.params_mut().iter().map(|(_, p)| p.len()).collect();
        Self {
            config,
            steps: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, module: &mut impl Module<T>) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let params = module.params_mut();
        assert_eq!(params.len(), self.m.len(), "optimizer/module parameter mismatch");
        for (k, (_, p)) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quadratic {
        p: Param<f64>,
    }

    impl Module<f64> for Quadratic {
        fn params_mut(&mut self) -> Vec<(String, &mut Param<f64>)> {
            vec![("p".into(), &mut self.p)]
        }
        fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
            Vec::new()
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr · sign(g)
        let mut q = Quadratic { p: Param::new(vec![1.0, -1.0]) };
        let mut opt = Adam::new(AdamConfig::default(), &mut q);
        q.p.grad = vec![3.0, -0.5];
        opt.step(&mut q);
        assert!((q.p.value[0] - (1.0 - 2e-4)).abs() < 1e-9);
        assert!((q.p.value[1] - (-1.0 + 2e-4)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic { p: Param::new(vec![2.0]) };
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &mut q);
        for _ in 0..2000 {
            q.p.grad[0] = 2.0 * q.p.value[0];
            opt.step(&mut q);
        }
        assert!(q.p.value[0].abs() < 1e-2, "{}", q.p.value[0]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
