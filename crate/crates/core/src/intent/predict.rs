use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{mean_position_error, BranchModel, OUT_DIM};
use crate::trajectory::{Branch, StateSample};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedStep {
    pub pos: Vec3,
    pub vel: Vec3,
}

impl PredictedStep {
    fn from_row(row: &[f64; OUT_DIM]) -> Self {
        Self {
            pos: Vec3::new(row[0], row[1], row[2]),
            vel: Vec3::new(row[3], row[4], row[5]),
        }
    }
}

/// Future states at `t_now + (k + 1)·dt` for `k = 0..steps.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub t_now: f64,
    pub dt: f64,
    pub steps: Vec<PredictedStep>,
}

impl Prediction {
    pub fn positions(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.pos).collect()
    }

    /// Predicted state at absolute time `t`, held at the ends and linearly
    /// interpolated between steps. `None` for an empty prediction.
    pub fn at(&self, t: f64) -> Option<PredictedStep> {
        let last = self.steps.len().checked_sub(1)?;
        let u = ((t - self.t_now) / self.dt - 1.0).clamp(0.0, last as f64);
        let i = (libm::floor(u) as usize).min(last);
        let j = (i + 1).min(last);
        let w = u - i as f64;
        let (a, b) = (self.steps[i], self.steps[j]);
        Some(PredictedStep {
            pos: a.pos * (1.0 - w) + b.pos * w,
            vel: a.vel * (1.0 - w) + b.vel * w,
        })
    }
}

/// Anything that maps an observation window to a future trajectory.
pub trait Predictor: Send + Sync {
    fn branch(&self) -> Branch;
    fn obs_len(&self) -> usize;
    fn fut_len(&self) -> usize;
    fn predict(&self, past: &[StateSample]) -> Result<Prediction>;
}

fn window_timing(past: &[StateSample]) -> Result<(f64, f64)> {
    if past.len() < 2 {
        return Err(Error::Validation(format!("need >= 2 past samples, got {}", past.len())));
    }
    Ok((past[past.len() - 1].t, past[1].t - past[0].t))
}

/// Extrapolates the last observed velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantVelocity {
    pub branch: Branch,
    pub obs_len: usize,
    pub fut_len: usize,
}

impl ConstantVelocity {
    pub fn rollout(past: &[StateSample], fut_len: usize) -> Result<Prediction> {
        let (t_now, dt) = window_timing(past)?;
        let last = past[past.len() - 1];
        let steps = (1..=fut_len)
            .map(|k| PredictedStep {
                pos: last.pos + last.vel * (k as f64 * dt),
                vel: last.vel,
            })
            .collect();
        Ok(Prediction { t_now, dt, steps })
    }
}

impl Predictor for ConstantVelocity {
    fn branch(&self) -> Branch {
        self.branch
    }

    fn obs_len(&self) -> usize {
        self.obs_len
    }

    fn fut_len(&self) -> usize {
        self.fut_len
    }

    fn predict(&self, past: &[StateSample]) -> Result<Prediction> {
        Self::rollout(past, self.fut_len)
    }
}

impl BranchModel {
    /// Decode at the prior mean and take the top-weight component mean per step.
    pub fn sample_most_likely(&self, past: &[StateSample]) -> Result<Vec<[f64; OUT_DIM]>> {
        let p = self.encode_past(past)?;
        Ok(self.decode(past, &p.mean)?.top_means())
    }

    /// Best of `n` candidates against `gt` positions: the prior mean followed
    /// by `n − 1` draws from `p(Z|X)`. Returns the winner and its ADE in mm.
    pub fn sample_best_of_n(
        &self,
        past: &[StateSample],
        n: usize,
        gt: &[Vec3],
        seed: u64,
    ) -> Result<(Vec<[f64; OUT_DIM]>, f64)> {
        if n == 0 {
            return Err(Error::Config("best-of-n needs n >= 1".into()));
        }
        if gt.len() != self.config().fut_len {
            return Err(Error::Validation(format!(
                "ground truth has {} steps, model predicts {}",
                gt.len(),
                self.config().fut_len
            )));
        }
        let p = self.encode_past(past)?;
        let (x, anchor) = self.past_tensor(past)?;
        let std = p.std();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(Vec<[f64; OUT_DIM]>, f64)> = None;
        for i in 0..n {
            let z: Vec<f64> = if i == 0 {
                p.mean.clone()
            } else {
                p.mean
                    .iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + s * e
                    })
                    .collect()
            };
            let cand = self.decode_normalized(x.clone(), anchor, &z)?.top_means();
            let pos: Vec<Vec3> = cand.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
            let ade = 1e3 * mean_position_error(&pos, gt);
            if best.as_ref().map_or(true, |(_, b)| ade < *b) {
                best = Some((cand, ade));
            }
        }
        Ok(best.expect("n >= 1"))
    }
}

impl Predictor for BranchModel {
    fn branch(&self) -> Branch {
        self.config().branch
    }

    fn obs_len(&self) -> usize {
        self.config().obs_len
    }

    fn fut_len(&self) -> usize {
        self.config().fut_len
    }

    fn predict(&self, past: &[StateSample]) -> Result<Prediction> {
        let (t_now, dt) = window_timing(past)?;
        let steps = self.sample_most_likely(past)?.iter().map(PredictedStep::from_row).collect();
        Ok(Prediction { t_now, dt, steps })
    }
}

/// Most-likely predictions from both branches for windows ending at the
/// same instant.
pub fn predict_dual(
    robot: &dyn Predictor,
    human: &dyn Predictor,
    past_robot: &[StateSample],
    past_human: &[StateSample],
) -> Result<(Prediction, Prediction)> {
    let (tr, dt) = window_timing(past_robot)?;
    let (th, _) = window_timing(past_human)?;
    if (tr - th).abs() > dt / 2.0 {
        return Err(Error::StalePredictions {
            age: (tr - th).abs(),
            limit: dt / 2.0,
        });
    }
    Ok((robot.predict(past_robot)?, human.predict(past_human)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intent::ModelConfig;
    use crate::nn::NetConfig;

    fn toy(branch: Branch) -> BranchModel {
        let net = NetConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            d_z: 2,
            n_mix: 2,
            dropout: 0.0,
        };
        BranchModel::new(
            ModelConfig {
                branch,
                net,
                obs_len: 4,
                fut_len: 3,
            },
            5,
        )
        .unwrap()
    }

    fn line(n: usize, t0: f64, force: bool) -> Vec<StateSample> {
        (0..n)
            .map(|i| {
                let t = t0 + i as f64 * 0.1;
                StateSample::new(t, Vec3::new(t, 0.5 * t, 0.0), Vec3::new(1.0, 0.5, 0.0), force.then(Vec3::zeros))
            })
            .collect()
    }

    #[test]
    fn constant_velocity_extrapolates() {
        let past = line(4, 0.0, false);
        let p = ConstantVelocity::rollout(&past, 3).unwrap();
        assert!((p.t_now - 0.3).abs() < 1e-12);
        for (k, s) in p.steps.iter().enumerate() {
            let t = 0.3 + 0.1 * (k + 1) as f64;
            assert!((s.pos - Vec3::new(t, 0.5 * t, 0.0)).norm() < 1e-12);
        }
        let mid = p.at(0.45).unwrap();
        assert!((mid.pos.x - 0.45).abs() < 1e-12);
    }

    #[test]
    fn most_likely_is_deterministic_and_best_of_n_contains_it() {
        let model = toy(Branch::Robot);
        let past = line(4, 0.0, false);
        let a = model.sample_most_likely(&past).unwrap();
        assert_eq!(a, model.sample_most_likely(&past).unwrap());
        let gt: Vec<Vec3> = line(7, 0.0, false)[4..].iter().map(|s| s.pos + Vec3::new(0.0, 0.02, 0.0)).collect();
        let ml: Vec<Vec3> = a.iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
        let ml_ade = 1e3 * mean_position_error(&ml, &gt);
        let (one, ade_one) = model.sample_best_of_n(&past, 1, &gt, 3).unwrap();
        assert_eq!(one, a);
        assert!((ade_one - ml_ade).abs() < 1e-9);
        let (_, ade) = model.sample_best_of_n(&past, 20, &gt, 3).unwrap();
        assert!(ade <= ml_ade);
        assert_eq!(model.sample_best_of_n(&past, 20, &gt, 3).unwrap().1, ade);
    }

    #[test]
    fn dual_prediction_shapes_and_staleness() {
        let robot = toy(Branch::Robot);
        let human = toy(Branch::Human);
        let xr = line(4, 0.0, false);
        let xh = line(4, 0.0, true);
        let (pr, ph) = predict_dual(&robot, &human, &xr, &xh).unwrap();
        assert_eq!(pr.steps.len(), 3);
        assert_eq!(ph.steps.len(), 3);
        assert!(pr.steps.iter().chain(&ph.steps).all(|s| s.pos.iter().chain(s.vel.iter()).all(|v| v.is_finite())));
        let late = line(4, 0.06, true);
        assert!(matches!(
            predict_dual(&robot, &human, &xr, &late),
            Err(Error::StalePredictions { .. })
        ));
    }
}
