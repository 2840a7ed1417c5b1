use alloc::vec::Vec;

use super::{ParamStore, Tensor};

/// Whether an optimizer step touched the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was mutated.
    SkippedNonFinite,
}

/// Bias-corrected adaptive-moment optimizer over a [`ParamStore`]'s
/// gradient accumulators.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_moments(store, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_moments(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of applied steps.
    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore) -> StepOutcome {
        if store.iter().any(|(_, p)| !p.grad.is_finite()) {
            return StepOutcome::SkippedNonFinite;
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((p, m), v) in store.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let values = p.value.data_mut();
            for (i, &g) in grad.iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = m.data()[i] / c1;
                let v_hat = v.data()[i] / c2;
                values[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        StepOutcome::Applied
    }
}
