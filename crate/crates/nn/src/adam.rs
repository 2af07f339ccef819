//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        Self {
            config,
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter in place.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err(format!(
                "adam: state holds {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return shape_err(format!(
                    "adam: tensor {i} has {} params / {} grads, state expects {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let inv_bias1 = T::from_f64(1.0 / bias1);
        let inv_bias2 = T::from_f64(1.0 / bias2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] * inv_bias1;
                let v_hat = v[j] * inv_bias2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[1]);
        let mut p = [0.0];
        state.step(&mut [&mut p[..]], &[&[1.0][..]]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_the_step() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[3]);
        let mut p = [1.0f32, -2.0, 0.5];
        state.step(&mut [&mut p[..]], &[&[0.0; 3][..]]).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut state = AdamState::<f32>::new(AdamConfig::default(), &[4]);
            let mut p = [0.1f32, 0.2, 0.3, 0.4];
            for k in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| (x * k as f32).sin()).collect();
                state.step(&mut [&mut p[..]], &[&g[..]]).unwrap();
            }
            p
        };
        assert_eq!(run().map(f32::to_bits), run().map(f32::to_bits));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut state = AdamState::<f32>::new(AdamConfig::default(), &[2]);
        let mut p = [0.0f32; 3];
        assert!(state.step(&mut [&mut p[..]], &[&[0.0; 3][..]]).is_err());
    }
}
