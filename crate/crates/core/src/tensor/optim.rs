use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment accumulators plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f32>>,
    pub second: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    /// One bias-corrected Adam update of every parameter that has a gradient.
    /// Parameters without an entry in `grads` are left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::mismatch("adam_step", p.shape(), g.shape()));
            }
        }
        self.state.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).unwrap();
            let n = p.numel();
            let m = self.state.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.state.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut w = p.to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            *p = Tensor::raw(p.shape().to_vec(), w);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let w = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut params = single("w", w.clone());
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut params, &single("w", Tensor::zeros(&[3]))).unwrap();
        }
        assert_eq!(params["w"], w);
        assert_eq!(adam.state.step, 5);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut params = single("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let g = single("w", Tensor::from_vec(&[2], vec![0.3, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() });
        for _ in 0..50 {
            adam.step(&mut params, &g).unwrap();
        }
        let w = params["w"].data();
        assert!(w[0] < 0.0 && w[1] > 0.0, "{w:?}");
    }

    #[test]
    fn quadratic_bowl_norm_decreases() {
        // f(w) = |w|^2, grad 2w. With a constant step size Adam approaches the
        // minimum at roughly lr per step, so the norm must shrink each step
        // until it is within a few lr of zero.
        let mut params = single("w", Tensor::from_vec(&[4], vec![1.0, -0.8, 0.6, 0.4]).unwrap());
        let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..Default::default() });
        let mut norms = vec![params["w"].norm()];
        for _ in 0..200 {
            let g = params["w"].scale(2.0).unwrap();
            adam.step(&mut params, &single("w", g)).unwrap();
            norms.push(params["w"].norm());
        }
        let warmup = 5;
        for pair in norms[warmup..].windows(2) {
            if pair[0] > 0.05 {
                assert!(pair[1] < pair[0], "norm rose: {pair:?}");
            }
        }
        assert!(*norms.last().unwrap() < 0.1 * norms[0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single("w", Tensor::zeros(&[3]));
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut params, &single("w", Tensor::zeros(&[4])));
        assert!(err.is_err());
        assert_eq!(adam.state.step, 0);
    }
}
