//! Adam optimizer state for a fixed, ordered list of parameter tensors.

use serde::{Deserialize, Serialize};

/// First/second moment buffers plus the step counter. The buffer list is
/// aligned with whatever parameter ordering the owner uses; that ordering
/// must stay stable for the lifetime of the state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Default Adam: step size 1e-3, moment decays 0.9/0.999, epsilon 1e-8.
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all parameters. `grads[i]` must match `params[i]` in
    /// length; the step counter increases exactly once per call.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "gradient length mismatch");
            assert_eq!(p.len(), m.len(), "moment buffer length mismatch");
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.step_size * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
