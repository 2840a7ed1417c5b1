//! Loading the predictor pair used by `simulate` and `serve`.

use std::path::Path;
use std::sync::Arc;

use phrc_core::control::ControllerConfig;
use phrc_core::intent::{ConstantVelocity, Predictor};
use phrc_core::trajectory::Branch;

use crate::checkpoint::load_model;
use crate::{Error, Result};

const DEFAULT_OBS: usize = 8;
const DEFAULT_FUT: usize = 12;

/// Robot and human predictors plus the history stride they expect.
#[derive(Clone)]
pub struct PredictorPair {
    pub robot: Arc<dyn Predictor>,
    pub human: Arc<dyn Predictor>,
    /// Sample period the models were trained at, if any model was loaded.
    pub dt: Option<f64>,
}

impl std::fmt::Debug for PredictorPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PredictorPair").field("dt", &self.dt).finish_non_exhaustive()
    }
}

fn load(path: &Path, branch: Branch) -> Result<(Arc<dyn Predictor>, Option<f64>)> {
    let ckpt = load_model(path)?;
    if ckpt.model.branch() != branch {
        return Err(Error::Usage(format!(
            "{} holds a {:?}-branch model, expected {branch:?}",
            path.display(),
            ckpt.model.branch()
        )));
    }
    Ok((Arc::new(ckpt.model), ckpt.dt))
}

impl PredictorPair {
    /// Constant-velocity extrapolation on both branches.
    pub fn constant_velocity() -> Self {
        let cv = |branch| -> Arc<dyn Predictor> {
            Arc::new(ConstantVelocity {
                branch,
                obs_len: DEFAULT_OBS,
                fut_len: DEFAULT_FUT,
            })
        };
        Self {
            robot: cv(Branch::Robot),
            human: cv(Branch::Human),
            dt: None,
        }
    }

    /// Checkpoints for either branch; a missing one falls back to constant
    /// velocity with the other branch's window lengths.
    pub fn load(robot: Option<&Path>, human: Option<&Path>) -> Result<Self> {
        let robot = robot.map(|p| load(p, Branch::Robot)).transpose()?;
        let human = human.map(|p| load(p, Branch::Human)).transpose()?;
        let dt = match (robot.as_ref().and_then(|r| r.1), human.as_ref().and_then(|h| h.1)) {
            (Some(a), Some(b)) if (a - b).abs() > 1e-12 => {
                return Err(Error::Usage(format!("models were trained at different dt ({a} vs {b})")))
            }
            (a, b) => a.or(b),
        };
        let lens = |p: &Option<(Arc<dyn Predictor>, Option<f64>)>| p.as_ref().map(|(m, _)| (m.obs_len(), m.fut_len()));
        let (obs_len, fut_len) = lens(&robot).or(lens(&human)).unwrap_or((DEFAULT_OBS, DEFAULT_FUT));
        let fallback = |branch| -> Arc<dyn Predictor> {
            Arc::new(ConstantVelocity {
                branch,
                obs_len,
                fut_len,
            })
        };
        Ok(Self {
            robot: robot.map_or_else(|| fallback(Branch::Robot), |r| r.0),
            human: human.map_or_else(|| fallback(Branch::Human), |h| h.0),
            dt,
        })
    }

    /// Control ticks between history samples so that windows match the
    /// models' training sample period.
    pub fn window_stride(&self, config: &ControllerConfig) -> Result<usize> {
        let Some(dt) = self.dt else { return Ok(1) };
        let ratio = dt / config.control_dt();
        let stride = ratio.round();
        if stride < 1.0 || (ratio - stride).abs() > 1e-6 {
            return Err(Error::Usage(format!(
                "model dt {dt} is not a whole multiple of the control period {}",
                config.control_dt()
            )));
        }
        Ok(stride as usize)
    }
}
