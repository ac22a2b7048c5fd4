//! AdamW with decoupled weight decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Decoupled-weight-decay Adam. Decay is applied directly to the parameters
/// and never enters the gradient-moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    moments: Vec<MomentPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentPair {
    shape: (usize, usize),
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must stay in the same order
    /// across calls; moment buffers are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| MomentPair {
                    shape: p.dim(),
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect();
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((param, grad), mom) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            assert_eq!(param.dim(), mom.shape, "parameter order changed");
            for (i, (p, &g)) in param.iter_mut().zip(grad.iter()).enumerate() {
                *p -= self.learning_rate * self.weight_decay * *p;
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                *p -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
