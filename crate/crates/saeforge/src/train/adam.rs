//! Adam over a flat parameter vector.
//!
//! The trainer flattens every trainable tensor into one canonical vector (see
//! [`super::flatten`]), so the optimizer itself is a plain elementwise Adam
//! with bias correction — no tensor bookkeeping.

use crate::sae::OptimizerBlob;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    /// Updates applied so far (bias-correction exponent).
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    /// One Adam update in place: `p ← p − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/gradient mismatch");
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }

    pub fn to_blob(&self) -> OptimizerBlob {
        OptimizerBlob {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_blob(blob: &OptimizerBlob) -> Self {
        Adam {
            t: blob.t,
            m: blob.m.clone(),
            v: blob.v.clone(),
        }
    }
}
