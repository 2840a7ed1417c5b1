//! Synthetic corpora: bifurcating minimum-jerk reaches for the robot branch
//! and obstacle-avoidance demonstrations with human force for the human
//! branch.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::profile::{min_jerk, Detour};
use crate::sim::{HeightClass, HumanLimb};
use crate::trajectory::{Branch, Label, StateSample, Trajectory};
use crate::{derive_seed, Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultimodalParams {
    pub duration: f64,
    /// Velocity noise standard deviation (m/s); positions integrate it.
    pub sigma_v: f64,
    pub min_length: f64,
    pub max_length: f64,
    /// Goals are spread over `±spread_deg` around the main direction.
    pub spread_deg: f64,
    pub min_goals: usize,
    pub max_goals: usize,
    /// Range of the bifurcation point as a fraction of the reach.
    pub bifurcation: (f64, f64),
}

impl Default for MultimodalParams {
    fn default() -> Self {
        Self {
            duration: 2.0,
            sigma_v: 0.01,
            min_length: 0.3,
            max_length: 0.6,
            spread_deg: 40.0,
            min_goals: 2,
            max_goals: 4,
            bifurcation: (0.3, 0.7),
        }
    }
}

/// One generated reach with the hidden mode it committed to.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalRecord {
    pub trajectory: Trajectory,
    pub goals: Vec<Vec3>,
    pub mode: usize,
    pub bifurcation: f64,
}

fn check_dt(dt: f64, duration: f64) -> Result<usize> {
    if !(dt > 0.0) || !(duration > 0.0) || duration / dt > 1e7 {
        return Err(Error::Config(format!("need dt > 0 and duration > 0, got {dt} / {duration}")));
    }
    Ok(libm::round(duration / dt) as usize + 1)
}

fn rotate_z(v: Vec3, angle: f64) -> Vec3 {
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Integrate white velocity noise into positions so that the velocity
/// channel stays consistent with the path.
fn add_velocity_noise(samples: &mut [StateSample], dt: f64, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let mut drift = Vec3::zeros();
    for s in samples.iter_mut() {
        let n = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        s.pos += drift;
        s.vel += n;
        drift += n * dt;
    }
}

pub fn multimodal_record(index: u64, dt: f64, seed: u64, p: &MultimodalParams) -> Result<MultimodalRecord> {
    let n = check_dt(dt, p.duration)?;
    if p.min_goals < 1 || p.max_goals < p.min_goals {
        return Err(Error::Config("goal count range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let start = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.0..0.3));
    let heading = rng.random_range(0.0..core::f64::consts::TAU);
    let length = rng.random_range(p.min_length..=p.max_length);
    let dz = rng.random_range(-0.05..0.05);
    let main = Vec3::new(length * libm::cos(heading), length * libm::sin(heading), dz);
    let k = rng.random_range(p.min_goals..=p.max_goals);
    let spread = p.spread_deg.to_radians();
    let goals: Vec<Vec3> = (0..k)
        .map(|i| {
            let angle = if k == 1 { 0.0 } else { -spread + 2.0 * spread * i as f64 / (k - 1) as f64 };
            start + rotate_z(main, angle)
        })
        .collect();
    let mode = rng.random_range(0..k);
    let beta = rng.random_range(p.bifurcation.0..=p.bifurcation.1);
    let centre = start + main;
    let turn = goals[mode] - centre;
    let t_total = (n - 1) as f64 * dt;
    let mut samples: Vec<StateSample> = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let tau = t / t_total;
            let (a, da, _) = min_jerk(tau);
            let u = (tau - beta) / (1.0 - beta);
            let (b, db, _) = min_jerk(u);
            let pos = start + main * a + turn * b;
            let vel = main * (da / t_total) + turn * (db / ((1.0 - beta) * t_total));
            StateSample::new(t, pos, vel, None)
        })
        .collect();
    add_velocity_noise(&mut samples, dt, p.sigma_v, &mut rng);
    Ok(MultimodalRecord {
        trajectory: Trajectory::new(Branch::Robot, Label::ObstacleFree, dt, samples)?,
        goals,
        mode,
        bifurcation: beta,
    })
}

pub fn gen_multimodal_with(n: usize, dt: f64, seed: u64, p: &MultimodalParams) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Config("need at least one trajectory".into()));
    }
    (0..n as u64).map(|i| multimodal_record(i, dt, seed, p).map(|r| r.trajectory)).collect()
}

/// Robot-branch reaches from a random start towards one of 2–4 goals, the
/// goal being chosen at a uniformly drawn bifurcation point.
pub fn gen_multimodal(n: usize, dt: f64, seed: u64) -> Result<Vec<Trajectory>> {
    gen_multimodal_with(n, dt, seed, &MultimodalParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhrcParams {
    /// Nominal start of the reach; each record jitters it by up to
    /// `start_jitter` per axis.
    pub start: Vec3,
    pub start_jitter: f64,
    /// Reach heading in the xy-plane (rad) and its uniform jitter.
    pub heading: f64,
    pub heading_jitter: f64,
    pub duration: f64,
    pub sigma_v: f64,
    pub min_length: f64,
    pub max_length: f64,
    /// Lateral clearance beyond the obstacle radius.
    pub margin: f64,
    /// Path length over which the detour rises and falls.
    pub ramp: f64,
    pub limb: HumanLimb,
    pub f_max: f64,
}

impl Default for PhrcParams {
    fn default() -> Self {
        Self {
            start: Vec3::new(0.0, 0.0, 0.2),
            start_jitter: 0.05,
            heading: 0.0,
            heading_jitter: 0.35,
            duration: 4.0,
            sigma_v: 0.005,
            min_length: 0.6,
            max_length: 0.8,
            margin: 0.05,
            ramp: 0.15,
            limb: HumanLimb::default(),
            f_max: 20.0,
        }
    }
}

/// One demonstration with its detour geometry (absent for free motion).
#[derive(Debug, Clone, PartialEq)]
pub struct PhrcRecord {
    pub trajectory: Trajectory,
    pub start: Vec3,
    pub goal: Vec3,
    pub detour: Option<(Detour, HeightClass, Vec3)>,
}

pub fn phrc_record(index: u64, avoid: bool, dt: f64, seed: u64, p: &PhrcParams) -> Result<PhrcRecord> {
    let n = check_dt(dt, p.duration)?;
    let ranges_ok = p.start_jitter >= 0.0
        && p.heading_jitter >= 0.0
        && p.min_length > 0.0
        && p.min_length <= p.max_length
        && p.margin >= 0.0
        && p.ramp > 0.0
        && p.f_max > 0.0
        && p.start.iter().chain([&p.heading]).all(|v| v.is_finite());
    if !ranges_ok {
        return Err(Error::Config("phrc parameters out of range".into()));
    }
    p.limb.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    let j = p.start_jitter;
    let start = p.start + Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j));
    let heading = p.heading + rng.random_range(-p.heading_jitter..=p.heading_jitter);
    let length = rng.random_range(p.min_length..=p.max_length);
    let dir = Vec3::new(libm::cos(heading), libm::sin(heading), 0.0);
    let lateral = rotate_z(dir, core::f64::consts::FRAC_PI_2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let goal = start + dir * length;
    let t_total = (n - 1) as f64 * dt;
    let detour = avoid.then(|| {
        let class = if rng.random_bool(0.5) { HeightClass::Low } else { HeightClass::High };
        let reach = class.radius() + p.margin + p.ramp;
        let s_obs = (length * rng.random_range(0.45..0.55)).clamp(reach, (length - reach).max(reach));
        let d = Detour {
            s_obs,
            radius: class.radius(),
            margin: p.margin,
            ramp: p.ramp,
        };
        (d, class, lateral)
    });
    let mut samples: Vec<StateSample> = (0..n)
        .map(|i| {
            let t = i as f64 * dt;
            let (a, da, _) = min_jerk(t / t_total);
            let s = length * a;
            let s_dot = length * da / t_total;
            let nominal = (start + dir * s, dir * s_dot);
            let (pos, vel) = match &detour {
                Some((d, _, lat)) => {
                    let (off, d_off) = d.offset(s);
                    (nominal.0 + lat * off, nominal.1 + lat * (d_off * s_dot))
                }
                None => nominal,
            };
            StateSample::new(t, pos, vel, None)
        })
        .collect();
    if avoid {
        // The limb pulls an arm that still tracks the nominal path onto the detour.
        for s in samples.iter_mut() {
            let (a, da, _) = min_jerk(s.t / t_total);
            let x_nom = start + dir * (length * a);
            let v_nom = dir * (length * da / t_total);
            s.force = Some(p.limb.force(&s.pos, &s.vel, &x_nom, &v_nom, p.f_max));
        }
    }
    add_velocity_noise(&mut samples, dt, p.sigma_v, &mut rng);
    let (branch, label) = if avoid {
        (Branch::Human, Label::ObstacleAvoid)
    } else {
        (Branch::Robot, Label::ObstacleFree)
    };
    Ok(PhrcRecord {
        trajectory: Trajectory::new(branch, label, dt, samples)?,
        start,
        goal,
        detour,
    })
}

pub fn gen_phrc_with(n_free: usize, n_avoid: usize, dt: f64, seed: u64, p: &PhrcParams) -> Result<Vec<Trajectory>> {
    (0..(n_free + n_avoid) as u64)
        .map(|i| phrc_record(i, i >= n_free as u64, dt, seed, p).map(|r| r.trajectory))
        .collect()
}

/// `n_free` straight Robot-branch reaches followed by `n_avoid` Human-branch
/// detours whose force follows the limb law against the nominal path.
pub fn gen_phrc(n_free: usize, n_avoid: usize, dt: f64, seed: u64) -> Result<Vec<Trajectory>> {
    gen_phrc_with(n_free, n_avoid, dt, seed, &PhrcParams::default())
}
