//! Closed-loop admittance simulation: the plant, a scripted human partner,
//! the episode engine and the collaboration metrics.

mod episode;
mod metrics;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use episode::{run_episode, ClosedLoop, EpisodeHeader, EpisodeLog, EpisodeOptions, KappaMode, TickRecord};
pub use metrics::{metric_ade, metric_fde, metric_phrc, phrc_from_series, PhrcAccumulator, PhrcMetrics, GUIDED_FORCE_EPS};

use crate::control::{ImpedanceParams, Mat3};
use crate::profile::{min_jerk, Detour};
use crate::{derive_seed, Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeightClass {
    Low,
    High,
}

impl HeightClass {
    pub fn radius(self) -> f64 {
        match self {
            HeightClass::Low => 0.04,
            HeightClass::High => 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec3,
    pub radius: f64,
    pub class: HeightClass,
}

/// Diagonal damping and stiffness of the human arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanLimb {
    pub d_h: [f64; 3],
    pub k_h: [f64; 3],
}

impl Default for HumanLimb {
    fn default() -> Self {
        Self {
            d_h: [60.0; 3],
            k_h: [500.0; 3],
        }
    }
}

impl HumanLimb {
    pub fn validate(&self) -> Result<()> {
        if self.d_h.iter().chain(&self.k_h).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("limb damping and stiffness must be positive".into()));
        }
        Ok(())
    }

    /// `K_h(x_des − x) + D_h(ẋ_des − ẋ)`, norm-clamped to `f_max`.
    pub fn force(&self, x_des: &Vec3, v_des: &Vec3, x: &Vec3, v: &Vec3, f_max: f64) -> Vec3 {
        human_force(self, x, v, x_des, v_des, f_max)
    }
}

pub fn human_force(limb: &HumanLimb, x: &Vec3, v: &Vec3, x_des: &Vec3, v_des: &Vec3, f_max: f64) -> Vec3 {
    let k = Mat3::from_diagonal(&Vec3::from(limb.k_h));
    let d = Mat3::from_diagonal(&Vec3::from(limb.d_h));
    let f = k * (x_des - x) + d * (v_des - v);
    let n = f.norm();
    if n > f_max {
        f * (f_max / n)
    } else {
        f
    }
}

/// Semi-implicit Euler step of `Mẍ = f_h + f_r − D(ẋ − ẋ_ref) − K(x − x_ref)`.
#[allow(clippy::too_many_arguments)]
pub fn plant_step(
    imp: &ImpedanceParams,
    x: &Vec3,
    v: &Vec3,
    x_ref: &Vec3,
    v_ref: &Vec3,
    f_h: &Vec3,
    f_r: &Vec3,
    dt: f64,
) -> Result<(Vec3, Vec3)> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be > 0, got {dt}")));
    }
    let m_inv = imp.m_inv()?;
    let acc = m_inv * (f_h + f_r - imp.d * (v - v_ref) - imp.k * (x - x_ref));
    let v_next = v + acc * dt;
    let x_next = x + v_next * dt;
    Ok((x_next, v_next))
}

/// The scripted partner: idle until the end-effector is within one ramp
/// length of an obstacle (measured along the path), then pulls it along a
/// lateral minimum-jerk detour until the detour has fully returned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanPolicy {
    pub limb: HumanLimb,
    pub margin: f64,
    pub ramp: f64,
    /// Which side to pass on: `+1` is the path direction rotated by +90° about z.
    pub side: f64,
    /// Standard deviation of additive force noise (N); 0 disables it.
    pub force_noise: f64,
}

impl Default for HumanPolicy {
    fn default() -> Self {
        Self {
            limb: HumanLimb::default(),
            margin: 0.05,
            ramp: 0.15,
            side: 1.0,
            force_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub start: Vec3,
    pub goal: Vec3,
    pub obstacles: Vec<Obstacle>,
    pub human: HumanPolicy,
    pub f_max: f64,
    pub duration: f64,
    /// Time the robot's own plan takes to reach the goal.
    pub plan_duration: f64,
}

impl Scenario {
    /// Obstacle-free reach.
    pub fn free() -> Self {
        Self {
            name: "free".into(),
            start: Vec3::new(0.0, 0.0, 0.2),
            goal: Vec3::new(0.6, 0.0, 0.2),
            obstacles: Vec::new(),
            human: HumanPolicy::default(),
            f_max: 20.0,
            duration: 5.0,
            plan_duration: 4.0,
        }
    }

    /// The reach with one obstacle on the path; the seed picks its position
    /// along the path, its height class and the side the human passes on.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5CE4));
        let mut s = Self::free();
        let class = if rng.random_bool(0.5) { HeightClass::Low } else { HeightClass::High };
        let along = rng.random_range(0.4..0.6);
        s.name = "standard".into();
        s.obstacles.push(Obstacle {
            center: s.start + (s.goal - s.start) * along,
            radius: class.radius(),
            class,
        });
        s.human.side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        s
    }

    /// Named presets: `free`, `standard` (seed 0), `standard-<seed>`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "free" => Some(Self::free()),
            "standard" => Some(Self::standard(0)),
            _ => name.strip_prefix("standard-")?.parse().ok().map(Self::standard),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.human.limb.validate()?;
        let length = (self.goal - self.start).norm();
        if !(length > 0.0) {
            return Err(Error::Config("start and goal coincide".into()));
        }
        if !(self.f_max > 0.0) || !(self.duration > 0.0) || !(self.plan_duration > 0.0) {
            return Err(Error::Config("f_max, duration and plan_duration must be > 0".into()));
        }
        if !(self.human.margin >= 0.0 && self.human.ramp > 0.0 && self.human.force_noise >= 0.0) {
            return Err(Error::Config("human margin, ramp and noise must be non-negative (ramp > 0)".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) {
                return Err(Error::Config(format!("obstacle {i} needs a positive radius")));
            }
            if (o.center - self.start).norm() <= o.radius || (o.center - self.goal).norm() <= o.radius {
                return Err(Error::Config(format!("obstacle {i} contains the start or the goal")));
            }
        }
        Ok(())
    }

    pub fn direction(&self) -> Vec3 {
        (self.goal - self.start).normalize()
    }

    pub fn lateral(&self) -> Vec3 {
        let d = self.direction();
        let side = Vec3::new(-d.y, d.x, 0.0);
        let side = if side.norm() > 1e-9 { side.normalize() } else { Vec3::new(0.0, 1.0, 0.0) };
        side * self.human.side.signum()
    }

    /// Minimum-jerk task plan from start to goal.
    pub fn plan(&self, t: f64) -> (Vec3, Vec3) {
        let (a, da, _) = min_jerk(t / self.plan_duration);
        let delta = self.goal - self.start;
        (self.start + delta * a, delta * (da / self.plan_duration))
    }

    /// Detour geometry for each obstacle, in path coordinates.
    pub fn detours(&self) -> Vec<Detour> {
        let d = self.direction();
        self.obstacles
            .iter()
            .map(|o| Detour {
                s_obs: (o.center - self.start).dot(&d),
                radius: o.radius,
                margin: self.human.margin,
                ramp: self.human.ramp,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
