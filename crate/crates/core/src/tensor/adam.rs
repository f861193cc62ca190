use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments shaped like `sizes` (one entry per parameter tensor).
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update of `params` from their accumulated
    /// gradients. Parameters without a gradient are treated as having a zero
    /// gradient. Gradients are left in place; callers clear them.
    pub fn step<S: AsRef<str>>(&mut self, params: &mut [(S, &mut Tensor)]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::contract(format!(
                "adam: {} parameters but moments for {}",
                params.len(),
                self.first_moment.len()
            )));
        }
        for (i, (name, p)) in params.iter().enumerate() {
            let name = name.as_ref();
            if p.len() != self.first_moment[i].len() {
                return Err(Error::contract(format!(
                    "adam: parameter {name} has {} values, moments have {}",
                    p.len(),
                    self.first_moment[i].len()
                )));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingFault {
                        component: format!("gradient of {name}"),
                        step: None,
                        detail: "non-finite gradient".into(),
                    });
                }
            }
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let grad = p.grad().map(|g| g.to_vec());
            let values = p.data_mut();
            for k in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                values[k] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
