//! Adam optimizer with bias correction, keyed by parameter name.

use crate::params::Parameterized;
use std::collections::HashMap;

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with the standard defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
///
/// Moment buffers are allocated lazily per parameter name, so one optimizer
/// can drive any model whose parameter names are stable.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: HashMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the given named gradients. Parameters without a
    /// gradient entry are left untouched.
    pub fn step(&mut self, model: &mut impl Parameterized, grads: &[(String, Vec<f64>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let by_name: HashMap<&str, &[f64]> =
            grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())).collect();

        model.visit_mut(&mut |name, tensor| {
            let Some(&g) = by_name.get(name) else { return };
            assert_eq!(
                g.len(),
                tensor.len(),
                "gradient size mismatch for parameter {name}"
            );
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| Slot { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            let values = tensor.values_mut();
            for i in 0..g.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        });
    }
}
