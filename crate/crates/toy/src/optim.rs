//! Adaptive-moment gradient descent.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected first and second moment estimates for a list of matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let m: Vec<_> = shapes.into_iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            steps: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn update<'a>(
        &mut self,
        lr: f64,
        params: impl IntoIterator<Item = &'a mut Array2<f64>>,
        grads: &[Array2<f64>],
    ) {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / correct1;
                let vh = *v / correct2;
                *p -= lr * mh / (vh.sqrt() + c.epsilon);
            });
            count += 1;
        }
        assert_eq!(count, self.m.len(), "parameter count changed");
    }
}
