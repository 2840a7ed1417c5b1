//! Transformer CVAE for multi-step intent estimation.
//!
//! Each branch holds a past encoder `p(Z|X)`, a future encoder `q(Z|X,Y)`
//! that attends from future tokens to past features, and a causally masked
//! decoder that turns a latent sample plus a temporal convolution of the past
//! into per-step Gaussian-mixture parameters over position and velocity.

mod model;
mod predict;
mod train;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use model::{BranchModel, ModelConfig, Normalizer};
pub use predict::{predict_dual, ConstantVelocity, PredictedStep, Prediction, Predictor};
pub use train::{train, train_with, window_loss, EpochStats, TrainOptions, TrainReport, WindowLoss};

use crate::nn::kl_diag_value;
use crate::{Error, Result, Vec3};

/// Latent log-variances are clamped to this range.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);
/// Output dimensions per future step: position and velocity.
pub const OUT_DIM: usize = 6;
/// Lower bound on any mixture-component variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| libm::exp(0.5 * lv)).collect()
    }
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_divergence(q: &GaussianParams, p: &GaussianParams) -> f64 {
    kl_diag_value(&q.mean, &q.log_var, &p.mean, &p.log_var)
}

/// Mixture over `[pos, vel]` at one future step.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmStep {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; OUT_DIM]>,
    pub variances: Vec<[f64; OUT_DIM]>,
}

impl GmmStep {
    /// Index of the highest-weight component; ties go to the lowest index.
    pub fn top_component(&self) -> usize {
        let mut best = 0;
        for (k, &w) in self.weights.iter().enumerate().skip(1) {
            if w > self.weights[best] {
                best = k;
            }
        }
        best
    }

    pub fn log_likelihood(&self, y: &[f64; OUT_DIM]) -> f64 {
        let joint: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let mut ll = libm::log(self.weights[k]);
                for j in 0..OUT_DIM {
                    let var = self.variances[k][j];
                    let diff = y[j] - self.means[k][j];
                    ll -= 0.5 * (libm::log(2.0 * core::f64::consts::PI * var) + diff * diff / var);
                }
                ll
            })
            .collect();
        crate::nn::log_sum_exp(&joint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSequence {
    pub steps: Vec<GmmStep>,
}

impl GmmSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Per-step mean of the highest-weight component.
    pub fn top_means(&self) -> Vec<[f64; OUT_DIM]> {
        self.steps.iter().map(|s| s.means[s.top_component()]).collect()
    }
}

/// Weights of the two ELBO terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub kl_weight: f64,
    pub recon_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl_weight: 1.0,
            recon_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.kl_weight < 0.0 || self.recon_weight < 0.0 || !self.kl_weight.is_finite() || !self.recon_weight.is_finite() {
            return Err(Error::Config(alloc::format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// `kl_weight · KL(q ‖ p) − recon_weight · Σ_t log p(Y_t | gmm_t)`.
pub fn elbo_loss(
    p: &GaussianParams,
    q: &GaussianParams,
    gmm: &GmmSequence,
    future: &[[f64; OUT_DIM]],
    w: &LossWeights,
) -> Result<f64> {
    if gmm.len() != future.len() {
        return Err(Error::Shape {
            op: "elbo_loss",
            expected: alloc::format!("{} future steps", gmm.len()),
            got: alloc::format!("{}", future.len()),
        });
    }
    let mut log_lik = 0.0;
    for (t, (step, y)) in gmm.steps.iter().zip(future).enumerate() {
        let ll = step.log_likelihood(y);
        if !ll.is_finite() {
            return Err(Error::NonFiniteLikelihood { step: t });
        }
        log_lik += ll;
    }
    Ok(w.kl_weight * kl_divergence(q, p) - w.recon_weight * log_lik)
}

/// Mean Euclidean position error (metres) between two sequences.
pub(crate) fn mean_position_error(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn elbo_examples() {
        let p = GaussianParams {
            mean: vec![0.0],
            log_var: vec![0.0],
        };
        let q = GaussianParams {
            mean: vec![1.5],
            log_var: vec![0.0],
        };
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!((kl_divergence(&q, &p) - 1.125).abs() < 1e-15);

        let mean = [0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let gmm = GmmSequence {
            steps: vec![GmmStep {
                weights: vec![1.0],
                means: vec![mean],
                variances: vec![[1.0; OUT_DIM]],
            }],
        };
        let ll = gmm.steps[0].log_likelihood(&mean);
        assert!((ll + 3.0 * libm::log(2.0 * core::f64::consts::PI)).abs() < 1e-12);
        let w = LossWeights {
            kl_weight: 2.0,
            recon_weight: 0.5,
        };
        let loss = elbo_loss(&p, &q, &gmm, &[mean], &w).unwrap();
        assert!((loss - (2.0 * 1.125 - 0.5 * ll)).abs() < 1e-12);
    }

    #[test]
    fn top_component_breaks_ties_low() {
        let step = GmmStep {
            weights: vec![0.2, 0.4, 0.4],
            means: vec![[0.0; OUT_DIM], [1.0; OUT_DIM], [2.0; OUT_DIM]],
            variances: vec![[1.0; OUT_DIM]; 3],
        };
        assert_eq!(step.top_component(), 1);
    }

    #[test]
    fn non_finite_likelihood_reports_step() {
        let step = GmmStep {
            weights: vec![1.0],
            means: vec![[0.0; OUT_DIM]],
            variances: vec![[1.0; OUT_DIM]],
        };
        let gmm = GmmSequence {
            steps: vec![step.clone(), step],
        };
        let p = GaussianParams {
            mean: vec![0.0],
            log_var: vec![0.0],
        };
        let mut bad = [0.0; OUT_DIM];
        bad[2] = f64::INFINITY;
        let err = elbo_loss(&p, &p, &gmm, &[[0.0; OUT_DIM], bad], &LossWeights::default()).unwrap_err();
        assert_eq!(err, Error::NonFiniteLikelihood { step: 1 });
    }

    proptest::proptest! {
        #[test]
        fn kl_is_non_negative(
            mq in proptest::collection::vec(-3.0f64..3.0, 3),
            lq in proptest::collection::vec(-4.0f64..4.0, 3),
            mp in proptest::collection::vec(-3.0f64..3.0, 3),
            lp in proptest::collection::vec(-4.0f64..4.0, 3),
        ) {
            let q = GaussianParams { mean: mq, log_var: lq };
            let p = GaussianParams { mean: mp, log_var: lp };
            proptest::prop_assert!(kl_divergence(&q, &p) >= -1e-12);
            proptest::prop_assert!(kl_divergence(&q, &q).abs() < 1e-12);
        }
    }
}
