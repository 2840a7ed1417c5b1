use alloc::collections::VecDeque;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{metric_phrc, plant_step, PhrcMetrics, Scenario};
use crate::control::{Allocator, ControllerConfig, ImpedanceParams, Tick, Vec6};
use crate::intent::{predict_dual, Prediction, Predictor};
use crate::profile::Detour;
use crate::trajectory::{Branch, StateSample};
use crate::{Error, Result, Vec3};

/// How the role coefficient is chosen each tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaMode {
    /// From the measured human force.
    Adaptive,
    /// Held constant.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOptions {
    pub kappa_mode: KappaMode,
    /// Control ticks between consecutive samples of a prediction window.
    pub window_stride: usize,
    /// Keep predicted positions in the log on refresh ticks.
    pub record_predictions: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            kappa_mode: KappaMode::Adaptive,
            window_stride: 1,
            record_predictions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
    pub f_h: Vec3,
    pub f_r: Vec3,
    pub kappa: f64,
    pub y_ref: Vec6,
    /// Predicted positions, present on ticks where predictions were refreshed.
    pub pred_h: Option<Vec<Vec3>>,
    pub pred_r: Option<Vec<Vec3>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub scenario: Scenario,
    pub config: ControllerConfig,
    pub seed: u64,
    pub kappa_mode: KappaMode,
    /// Guided-phase metrics.
    pub metrics: PhrcMetrics,
    /// Smallest `‖x − c‖ − r` over obstacles and ticks.
    pub min_clearance: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub ticks: Vec<TickRecord>,
}

impl EpisodeLog {
    pub fn cleared(&self) -> bool {
        self.header.failure.is_none() && self.header.min_clearance.map_or(true, |c| c > 0.0)
    }

    pub fn min_clearance(scenario: &Scenario, ticks: &[TickRecord]) -> Option<f64> {
        scenario
            .obstacles
            .iter()
            .flat_map(|o| ticks.iter().map(move |r| (r.x - o.center).norm() - o.radius))
            .reduce(f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Engaged,
    Done,
}

/// One simulated collaboration: plant, scripted (or external) human force,
/// predictors and allocator, advanced one control tick at a time.
pub struct ClosedLoop<'m> {
    scenario: Scenario,
    options: EpisodeOptions,
    allocator: Allocator,
    imp: ImpedanceParams,
    detours: Vec<Detour>,
    phases: Vec<Phase>,
    robot: &'m dyn Predictor,
    human: &'m dyn Predictor,
    noise: Option<(ChaCha8Rng, Normal<f64>)>,
    dt: f64,
    ticks_per_prediction: usize,
    tick: usize,
    x: Vec3,
    v: Vec3,
    history: VecDeque<StateSample>,
    predictions: Option<(Prediction, Prediction)>,
}

impl<'m> ClosedLoop<'m> {
    pub fn new(
        scenario: Scenario,
        config: ControllerConfig,
        robot: &'m dyn Predictor,
        human: &'m dyn Predictor,
        options: EpisodeOptions,
        seed: u64,
    ) -> Result<Self> {
        scenario.validate()?;
        if robot.branch() != Branch::Robot || human.branch() != Branch::Human {
            return Err(Error::Config("predictors must be (robot, human) branches".into()));
        }
        if robot.obs_len() != human.obs_len() {
            return Err(Error::Config("both predictors must use the same observation length".into()));
        }
        if options.window_stride == 0 {
            return Err(Error::Config("window stride must be >= 1".into()));
        }
        if let KappaMode::Fixed(k) = options.kappa_mode {
            if !(k > 0.0 && k < 1.0) {
                return Err(Error::Config(alloc::format!("fixed κ must lie in (0, 1), got {k}")));
            }
        }
        let allocator = Allocator::new(config)?;
        let dt = config.control_dt();
        let ratio = config.control_hz / config.predict_hz;
        let ticks_per_prediction = libm::round(ratio).max(1.0) as usize;
        if (ratio - ticks_per_prediction as f64).abs() > 1e-9 {
            return Err(Error::Config("control_hz must be an integer multiple of predict_hz".into()));
        }
        let noise = (scenario.human.force_noise > 0.0).then(|| {
            (
                ChaCha8Rng::seed_from_u64(seed),
                Normal::new(0.0, scenario.human.force_noise).expect("positive sigma"),
            )
        });
        let detours = scenario.detours();
        let mut sim = Self {
            imp: config.impedance(),
            phases: alloc::vec![Phase::Idle; detours.len()],
            detours,
            x: scenario.start,
            v: Vec3::zeros(),
            scenario,
            options,
            allocator,
            robot,
            human,
            noise,
            dt,
            ticks_per_prediction,
            tick: 0,
            history: VecDeque::new(),
            predictions: None,
        };
        // The arm rests at the start before the episode begins.
        let span = (sim.robot.obs_len() - 1) * options.window_stride;
        for k in (1..=span).rev() {
            let t = -(k as f64) * dt;
            sim.history.push_back(StateSample::new(t, sim.x, Vec3::zeros(), Some(Vec3::zeros())));
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn allocator_mut(&mut self) -> &mut Allocator {
        &mut self.allocator
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.dt
    }

    pub fn tick_index(&self) -> usize {
        self.tick
    }

    pub fn state(&self) -> (Vec3, Vec3) {
        (self.x, self.v)
    }

    pub fn predictions(&self) -> Option<&(Prediction, Prediction)> {
        self.predictions.as_ref()
    }

    /// Force of the scripted partner at the current state.
    pub fn scripted_force(&mut self) -> Vec3 {
        let dir = self.scenario.direction();
        let lat = self.scenario.lateral();
        let s = (self.x - self.scenario.start).dot(&dir);
        let s_dot = self.v.dot(&dir);
        let mut active = None;
        for (d, phase) in self.detours.iter().zip(self.phases.iter_mut()) {
            if *phase == Phase::Idle && s >= d.rise_start() {
                *phase = Phase::Engaged;
            }
            if *phase == Phase::Engaged && s > d.fall_end() {
                *phase = Phase::Done;
            }
            if *phase == Phase::Engaged && active.is_none() {
                active = Some(*d);
            }
        }
        let Some(d) = active else { return Vec3::zeros() };
        let (off, d_off) = d.offset(s);
        let x_des = self.scenario.start + dir * s + lat * off;
        let v_des = dir * s_dot + lat * (d_off * s_dot);
        let mut f = self.scenario.human.limb.force(&x_des, &v_des, &self.x, &self.v, self.scenario.f_max);
        if let Some((rng, normal)) = self.noise.as_mut() {
            f += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        }
        f
    }

    fn windows(&self) -> (Vec<StateSample>, Vec<StateSample>) {
        let n = self.robot.obs_len();
        let stride = self.options.window_stride;
        let last = self.history.len() - 1;
        let human: Vec<StateSample> = (0..n).rev().map(|k| self.history[last - k * stride]).collect();
        let robot = human.iter().map(|s| StateSample { force: None, ..*s }).collect();
        (robot, human)
    }

    fn keep_history(&mut self) {
        let keep = (self.robot.obs_len() - 1) * self.options.window_stride + 1;
        while self.history.len() > keep {
            self.history.pop_front();
        }
    }

    /// Advance one control tick. `external` replaces the scripted human
    /// force (it is clamped to the scenario's `f_max`).
    pub fn step(&mut self, external: Option<Vec3>) -> Result<TickRecord> {
        let t = self.time();
        let f_h = match external {
            Some(f) if f.norm() > self.scenario.f_max => f * (self.scenario.f_max / f.norm()),
            Some(f) => f,
            None => self.scripted_force(),
        };
        self.history.push_back(StateSample::new(t, self.x, self.v, Some(f_h)));
        self.keep_history();

        let refresh = self.tick % self.ticks_per_prediction == 0;
        if refresh {
            let (past_r, past_h) = self.windows();
            self.predictions = Some(predict_dual(self.robot, self.human, &past_r, &past_h)?);
        }
        let (pred_r, pred_h) = self.predictions.as_ref().expect("refreshed on tick 0");
        let target = t + self.dt;
        let as_state = |p: &Prediction| {
            let s = p.at(target).expect("non-empty prediction");
            Vec6::new(s.pos.x, s.pos.y, s.pos.z, s.vel.x, s.vel.y, s.vel.z)
        };
        let y = Vec6::new(self.x.x, self.x.y, self.x.z, self.v.x, self.v.y, self.v.z);
        let (y_h, y_r) = (as_state(pred_h), as_state(pred_r));
        let age = t - pred_r.t_now;
        let Tick { f_r, state } = match self.options.kappa_mode {
            KappaMode::Adaptive => self.allocator.tick(&f_h, &y, &y_h, &y_r, age)?,
            KappaMode::Fixed(k) => self.allocator.tick_with_kappa(k, &y, &y_h, &y_r, age)?,
        };
        if state.stale {
            return Err(Error::StalePredictions {
                age,
                limit: self.allocator.config().predict_period(),
            });
        }
        let record = TickRecord {
            t,
            x: self.x,
            v: self.v,
            f_h,
            f_r,
            kappa: state.kappa,
            y_ref: state.y_ref,
            pred_h: (refresh && self.options.record_predictions).then(|| pred_h.positions()),
            pred_r: (refresh && self.options.record_predictions).then(|| pred_r.positions()),
        };
        let (x_ref, v_ref) = self.scenario.plan(t);
        let (x, v) = plant_step(&self.imp, &self.x, &self.v, &x_ref, &v_ref, &f_h, &f_r, self.dt)?;
        if !(x.iter().chain(v.iter()).all(|c| c.is_finite())) {
            return Err(Error::NonFiniteState { tick: self.tick });
        }
        self.x = x;
        self.v = v;
        self.tick += 1;
        Ok(record)
    }
}

/// Run a scripted episode to completion. Runtime failures end the episode
/// early and are recorded in the header.
pub fn run_episode(
    scenario: &Scenario,
    config: &ControllerConfig,
    robot: &dyn Predictor,
    human: &dyn Predictor,
    options: &EpisodeOptions,
    seed: u64,
) -> Result<EpisodeLog> {
    let mut sim = ClosedLoop::new(scenario.clone(), *config, robot, human, *options, seed)?;
    let n_ticks = libm::round(scenario.duration * config.control_hz) as usize;
    let mut ticks = Vec::with_capacity(n_ticks + 1);
    let mut failure = None;
    for _ in 0..=n_ticks {
        match sim.step(None) {
            Ok(r) => ticks.push(r),
            Err(e) => {
                failure = Some(alloc::format!("tick {}: {}", sim.tick_index(), e.to_string()));
                break;
            }
        }
    }
    let mut log = EpisodeLog {
        header: EpisodeHeader {
            scenario: scenario.clone(),
            config: *config,
            seed,
            kappa_mode: options.kappa_mode,
            metrics: PhrcMetrics {
                theta: None,
                iasst: None,
                mu: None,
                work: 0.0,
                included_ticks: 0,
            },
            min_clearance: EpisodeLog::min_clearance(scenario, &ticks),
            failure,
        },
        ticks,
    };
    log.header.metrics = metric_phrc(&log, true);
    Ok(log)
}
