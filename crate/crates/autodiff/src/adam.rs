use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0) || !betas_ok || !(self.epsilon >= 0.0) {
            return Err(AutodiffError::Contract(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Moment buffers are allocated on the first step, one
/// per parameter slice, in the order the slices are passed.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (idx, (param, grad)) in pairs.into_iter().enumerate() {
            if param.len() != grad.len() {
                return Err(AutodiffError::Contract(format!(
                    "adam: parameter {idx} has {} values but gradient has {}",
                    param.len(),
                    grad.len()
                )));
            }
            if idx == self.first.len() {
                self.first.push(vec![0.0; param.len()]);
                self.second.push(vec![0.0; param.len()]);
            }
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            if m.len() != param.len() {
                return Err(AutodiffError::Contract(format!(
                    "adam: parameter {idx} changed size from {} to {}",
                    m.len(),
                    param.len()
                )));
            }
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_step(state: &mut AdamState, x: &mut f64) {
        let g = [2.0 * *x];
        let mut p = [*x];
        state.step([(&mut p[..], &g[..])]).unwrap();
        *x = p[0];
    }

    #[test]
    fn first_step_on_square() {
        let mut st = AdamState::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        })
        .unwrap();
        let mut x = 1.0;
        quad_step(&mut st, &mut x);
        // m_hat = 2, v_hat = 4 -> step = 0.1 * 2 / (2 + 1e-8)
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((x - expected).abs() < 1e-15);
        assert!((x - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut st = AdamState::new(AdamConfig::default()).unwrap();
        let mut p = [0.5, -2.0];
        st.step([(&mut p[..], &[0.0, 0.0][..])]).unwrap();
        assert_eq!(p, [0.5, -2.0]);
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn converges_on_square() {
        let mut st = AdamState::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        })
        .unwrap();
        let mut x = 1.0;
        for _ in 0..200 {
            quad_step(&mut st, &mut x);
        }
        assert!(x.abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamState::new(AdamConfig {
            beta1: 1.0,
            ..Default::default()
        })
        .is_err());
        assert!(AdamState::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        })
        .is_err());
    }
}
