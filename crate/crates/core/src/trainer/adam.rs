//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// First and second moments, one buffer per parameter tensor.
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Adam {
        Adam {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DclError::shape("optimizer state does not match the parameter list"));
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if p.len() != g.len() || p.len() != m.len() {
                return Err(DclError::shape(format!("parameter tensor {i} changed size")));
            }
            for j in 0..p.len() {
                let grad = g[j] as f64 + c.weight_decay * p[j] as f64;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * grad;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * grad * grad;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = c.learning_rate * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p[j] = (p[j] as f64 - update) as f32;
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
        // Bias-corrected first step is lr * sign(g) when eps is negligible.
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &[3]);
        let mut p = vec![1.0f32, -2.0, 0.5];
        let g = vec![0.3f32, -4.0, 0.0];
        opt.step(vec![&mut p], &[&g]).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-6);
        assert!((p[1] + 1.999).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.1, ..AdamConfig::default() }, &[1]);
        let mut p = vec![2.0f32];
        opt.step(vec![&mut p], &[&[0.0]]).unwrap();
        assert!(p[0] < 2.0);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0f32; 3];
        assert!(opt.step(vec![&mut p], &[&[0.0, 0.0, 0.0]]).is_err());
    }
}
