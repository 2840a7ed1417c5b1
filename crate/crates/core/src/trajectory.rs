//! Sampled end-effector trajectories, observation windows and the corpus
//! manifest.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

/// Timestamps of consecutive samples may deviate from `dt` by at most this.
pub const TIME_TOLERANCE: f64 = 1e-9;

/// Which prediction branch a trajectory feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Robot-led motion; position and velocity only.
    Robot,
    /// Human-guided motion; position, velocity and applied force.
    Human,
}

impl Branch {
    /// Width of one network input token for this branch.
    pub fn input_dim(self) -> usize {
        match self {
            Branch::Robot => 6,
            Branch::Human => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    ObstacleFree,
    ObstacleAvoid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSample {
    pub t: f64,
    pub pos: Vec3,
    pub vel: Vec3,
    pub force: Option<Vec3>,
}

impl StateSample {
    pub fn new(t: f64, pos: Vec3, vel: Vec3, force: Option<Vec3>) -> Self {
        Self { t, pos, vel, force }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.pos.iter().all(|v| v.is_finite())
            && self.vel.iter().all(|v| v.is_finite())
            && self.force.map_or(true, |f| f.iter().all(|v| v.is_finite()))
    }

    /// Network features: `[pos, vel]` or `[pos, vel, force]`.
    pub fn features(&self, branch: Branch) -> Vec<f64> {
        let mut out = Vec::with_capacity(branch.input_dim());
        out.extend(self.pos.iter());
        out.extend(self.vel.iter());
        if branch == Branch::Human {
            out.extend(self.force.unwrap_or_else(Vec3::zeros).iter());
        }
        out
    }
}

/// A uniformly sampled trajectory tagged with its branch and scenario label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    branch: Branch,
    label: Label,
    dt: f64,
    samples: Vec<StateSample>,
}

impl Trajectory {
    /// Validates sampling uniformity, finiteness and the force/branch pairing.
    pub fn new(branch: Branch, label: Label, dt: f64, samples: Vec<StateSample>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Validation(format!("dt must be positive, got {dt}")));
        }
        if samples.len() < 2 {
            return Err(Error::Validation(format!(
                "trajectory needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Validation(format!("sample {i} is not finite")));
            }
            match (branch, s.force.is_some()) {
                (Branch::Robot, true) => {
                    return Err(Error::Validation(format!(
                        "sample {i}: robot-branch samples carry no force"
                    )))
                }
                (Branch::Human, false) => {
                    return Err(Error::Validation(format!(
                        "sample {i}: human-branch samples require a force"
                    )))
                }
                _ => {}
            }
        }
        let t0 = samples[0].t;
        for (i, s) in samples.iter().enumerate() {
            let expected = t0 + i as f64 * dt;
            if (s.t - expected).abs() > TIME_TOLERANCE {
                return Err(Error::Validation(format!(
                    "sample {i}: timestamp {} deviates from uniform grid ({expected})",
                    s.t
                )));
            }
        }
        Ok(Self {
            branch,
            label,
            dt,
            samples,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[StateSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Re-tag as a human-branch trajectory, filling absent forces with zero.
    pub fn into_human(self) -> Self {
        let samples = self
            .samples
            .into_iter()
            .map(|s| StateSample {
                force: Some(s.force.unwrap_or_else(Vec3::zeros)),
                ..s
            })
            .collect();
        Self {
            branch: Branch::Human,
            samples,
            ..self
        }
    }

    /// Drop the force channel and re-tag as robot branch.
    pub fn into_robot(self) -> Self {
        let samples = self
            .samples
            .into_iter()
            .map(|s| StateSample { force: None, ..s })
            .collect();
        Self {
            branch: Branch::Robot,
            samples,
            ..self
        }
    }
}

/// Past observations ending at `T_now` and the samples strictly after it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub branch: Branch,
    pub dt: f64,
    pub past: Vec<StateSample>,
    pub future: Vec<StateSample>,
}

impl WindowPair {
    pub fn new(branch: Branch, dt: f64, past: Vec<StateSample>, future: Vec<StateSample>) -> Result<Self> {
        if past.len() < 2 || future.is_empty() {
            return Err(Error::Validation(format!(
                "window needs >= 2 past and >= 1 future samples, got {} / {}",
                past.len(),
                future.len()
            )));
        }
        let t0 = past[0].t;
        for (i, s) in past.iter().chain(future.iter()).enumerate() {
            if (s.t - (t0 + i as f64 * dt)).abs() > TIME_TOLERANCE {
                return Err(Error::Validation(format!("window sample {i} is not contiguous")));
            }
        }
        Ok(Self {
            branch,
            dt,
            past,
            future,
        })
    }

    /// Timestamp of the last observed sample.
    pub fn t_now(&self) -> f64 {
        self.past[self.past.len() - 1].t
    }

    /// Future positions as a plain list.
    pub fn future_positions(&self) -> Vec<Vec3> {
        self.future.iter().map(|s| s.pos).collect()
    }
}

/// Every window whose past ends at index `i` with `i >= obs_len - 1` and
/// `i + fut_len < len`, stepping `i` by `stride`. Too-short trajectories give
/// an empty list.
pub fn slice_windows(traj: &Trajectory, obs_len: usize, fut_len: usize, stride: usize) -> Result<Vec<WindowPair>> {
    if obs_len < 2 || fut_len < 1 {
        return Err(Error::Config(format!(
            "window lengths must satisfy obs >= 2, fut >= 1 (got {obs_len}, {fut_len})"
        )));
    }
    if stride == 0 {
        return Err(Error::Config(String::from("stride must be >= 1")));
    }
    let samples = traj.samples();
    let n = samples.len();
    let mut out = Vec::new();
    if n < obs_len + fut_len {
        return Ok(out);
    }
    let mut end = obs_len - 1;
    while end + fut_len < n {
        out.push(WindowPair {
            branch: traj.branch(),
            dt: traj.dt(),
            past: samples[end + 1 - obs_len..=end].to_vec(),
            future: samples[end + 1..=end + fut_len].to_vec(),
        });
        end += stride;
    }
    Ok(out)
}

/// Expected window count for a trajectory of `n` samples.
pub fn window_count(n: usize, obs_len: usize, fut_len: usize, stride: usize) -> usize {
    if n < obs_len + fut_len {
        0
    } else {
        (n - obs_len - fut_len) / stride + 1
    }
}

/// Header record of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub dt: f64,
    pub branch: Branch,
    pub count: usize,
    pub dim: usize,
    pub seed: u64,
    pub labels: Vec<Label>,
}

impl CorpusManifest {
    pub const VERSION: u32 = 1;

    /// Build a manifest describing `trajs`; they must share dt and branch.
    pub fn describe(trajs: &[Trajectory], branch: Branch, dt: f64, seed: u64) -> Result<Self> {
        let manifest = Self {
            version: Self::VERSION,
            dt,
            branch,
            count: trajs.len(),
            dim: 3,
            seed,
            labels: trajs.iter().map(Trajectory::label).collect(),
        };
        manifest.check(trajs)?;
        Ok(manifest)
    }

    /// Consistency of the manifest against a trajectory payload.
    pub fn check(&self, trajs: &[Trajectory]) -> Result<()> {
        if self.version != Self::VERSION {
            return Err(Error::Validation(format!(
                "unsupported corpus version {} (expected {})",
                self.version,
                Self::VERSION
            )));
        }
        if self.dim != 3 {
            return Err(Error::Validation(format!("unsupported dim {}", self.dim)));
        }
        if self.count != trajs.len() || self.labels.len() != trajs.len() {
            return Err(Error::Validation(format!(
                "manifest count {} / {} labels does not match {} trajectories",
                self.count,
                self.labels.len(),
                trajs.len()
            )));
        }
        for (i, t) in trajs.iter().enumerate() {
            if (t.dt() - self.dt).abs() > TIME_TOLERANCE {
                return Err(Error::Validation(format!(
                    "trajectory {i} has dt {} but corpus dt is {}",
                    t.dt(),
                    self.dt
                )));
            }
            if t.branch() != self.branch {
                return Err(Error::Validation(format!("trajectory {i} has branch {:?}", t.branch())));
            }
            if t.label() != self.labels[i] {
                return Err(Error::Validation(format!("trajectory {i} label disagrees with manifest")));
            }
        }
        Ok(())
    }
}
