use serde::{Deserialize, Serialize};

use crate::policy::{Gradient, PolicyParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerMode {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerMode {
    pub fn adam() -> Self {
        OptimizerMode::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Descent on a loss gradient, `theta <- theta - eta * step(g)`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    mode: OptimizerMode,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(mode: OptimizerMode) -> Self {
        Self { mode, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply(&mut self, params: &mut PolicyParams, grad: &Gradient, step_size: f64) {
        debug_assert_eq!(params.logits.len(), grad.values.len());
        self.t += 1;
        match self.mode {
            OptimizerMode::Sgd => {
                for (z, g) in params.logits.iter_mut().zip(&grad.values) {
                    *z -= step_size * g;
                }
            }
            OptimizerMode::Adam { beta1, beta2, eps } => {
                if self.m.len() != grad.values.len() {
                    self.m = vec![0.0; grad.values.len()];
                    self.v = vec![0.0; grad.values.len()];
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((z, g), m), v) in params.logits.iter_mut().zip(&grad.values).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *z -= step_size * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}
