//! Cooperative-game role allocation.
//!
//! Human and robot are two players acting on a shared admittance model
//! `Mẍ + Dẋ + Kx = f_h + f_r` with state `Y = [pos, vel]`. Their tracking
//! costs are blended by the role coefficient `κ = 1/(1 + e^{−α‖f_h‖})`,
//! the two predicted references are composed into one, and the blended LQR
//! problem gives the robot effort.

mod riccati;

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector6};
use serde::{Deserialize, Serialize};

pub use riccati::{are_residual, is_hurwitz, is_stabilizable, solve_are, solve_lyapunov, RiccatiSolution};

use crate::{Error, Result, Vec3};

pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;
pub type Vec6 = Vector6<f64>;

const SYMMETRY_TOL: f64 = 1e-12;

/// Desired inertia, damping and stiffness of the admittance model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedanceParams {
    pub m: Mat3,
    pub d: Mat3,
    pub k: Mat3,
}

impl ImpedanceParams {
    pub fn diagonal(m: Vec3, d: Vec3, k: Vec3) -> Self {
        Self {
            m: Mat3::from_diagonal(&m),
            d: Mat3::from_diagonal(&d),
            k: Mat3::from_diagonal(&k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, mat) in [("M", &self.m), ("D", &self.d), ("K", &self.k)] {
            let off = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).any(|(i, j)| i != j && mat[(i, j)] != 0.0);
            if off || mat.diagonal().iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config(format!("{name} must be diagonal with positive finite entries")));
            }
        }
        Ok(())
    }

    pub fn m_inv(&self) -> Result<Mat3> {
        self.m.try_inverse().ok_or(Error::Config("M is singular".into()))
    }
}

/// Player tracking weights (6×6, on `[pos, vel]` error) and effort weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub q_hh: Mat6,
    pub q_hr: Mat6,
    pub q_rh: Mat6,
    pub q_rr: Mat6,
    pub r_h: Mat3,
    pub r_r: Mat3,
}

fn symmetric_min_eigen<const N: usize>(m: &nalgebra::SMatrix<f64, N, N>, name: &str) -> Result<f64>
where
    nalgebra::Const<N>: nalgebra::DimMin<nalgebra::Const<N>> + nalgebra::DimSub<nalgebra::U1>,
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<nalgebra::DimDiff<nalgebra::Const<N>, nalgebra::U1>>,
{
    let scale = m.norm().max(1.0);
    if (m - m.transpose()).norm() > SYMMETRY_TOL * scale {
        return Err(Error::Config(format!("{name} is not symmetric")));
    }
    Ok(m.symmetric_eigenvalues().min())
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, q) in [("Q_hh", &self.q_hh), ("Q_hr", &self.q_hr), ("Q_rh", &self.q_rh), ("Q_rr", &self.q_rr)] {
            if symmetric_min_eigen(q, name)? < -SYMMETRY_TOL * q.norm().max(1.0) {
                return Err(Error::Config(format!("{name} is not positive semidefinite")));
            }
        }
        for (name, r) in [("R_h", &self.r_h), ("R_r", &self.r_r)] {
            if !(symmetric_min_eigen(r, name)? > 0.0) {
                return Err(Error::Config(format!("{name} is not positive definite")));
            }
        }
        Ok(())
    }
}

/// Linear model `Ẏ = AY + B[f_h; f_r]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateSpace {
    pub a: Mat6,
    pub b: Mat6,
}

pub fn build_state_space(imp: &ImpedanceParams) -> Result<StateSpace> {
    imp.validate()?;
    let m_inv = imp.m_inv()?;
    let mut a = Mat6::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-m_inv * imp.k));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-m_inv * imp.d));
    let mut b = Mat6::zeros();
    b.fixed_view_mut::<3, 3>(3, 0).copy_from(&m_inv);
    b.fixed_view_mut::<3, 3>(3, 3).copy_from(&m_inv);
    Ok(StateSpace { a, b })
}

/// `κ = 1/(1 + e^{−α‖f_h‖})`, in `[0.5, 1)`.
pub fn kappa_from_force(f_h: &Vec3, alpha: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-alpha * f_h.norm()))
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Config(format!("κ must lie in (0, 1), got {kappa}")));
    }
    Ok(())
}

/// Shared tracking weight `Q_κ` and block-diagonal effort weight `R_κ`.
pub fn blend_costs(kappa: f64, w: &CostWeights) -> Result<(Mat6, Mat6)> {
    check_kappa(kappa)?;
    let q = (w.q_hh + w.q_hr) * kappa + (w.q_rh + w.q_rr) * (1.0 - kappa);
    let mut r = Mat6::zeros();
    r.fixed_view_mut::<3, 3>(0, 0).copy_from(&(w.r_h * kappa));
    r.fixed_view_mut::<3, 3>(3, 3).copy_from(&(w.r_r * (1.0 - kappa)));
    if symmetric_min_eigen(&q, "Q_κ")? < -SYMMETRY_TOL * q.norm().max(1.0) {
        return Err(Error::Validation("blended Q_κ is not positive semidefinite".into()));
    }
    Ok((q, r))
}

/// Per-player reference weights `(Q_h, Q_r)`.
pub fn reference_weights(kappa: f64, w: &CostWeights) -> (Mat6, Mat6) {
    (
        w.q_hh * kappa + w.q_hr * (1.0 - kappa),
        w.q_rh * kappa + w.q_rr * (1.0 - kappa),
    )
}

/// `Y_ref = Q_κ⁻¹(Q_h·Ŷ_h + Q_r·Ŷ_r)` per step.
pub fn compose_reference(kappa: f64, y_h: &[Vec6], y_r: &[Vec6], w: &CostWeights) -> Result<Vec<Vec6>> {
    if y_h.len() != y_r.len() {
        return Err(Error::Validation(format!(
            "reference lengths differ: {} vs {}",
            y_h.len(),
            y_r.len()
        )));
    }
    let (q, _) = blend_costs(kappa, w)?;
    let q_inv = q.try_inverse().ok_or(Error::Singular("Q_κ"))?;
    let (qh, qr) = reference_weights(kappa, w);
    Ok(y_h.iter().zip(y_r).map(|(h, r)| q_inv * (qh * h + qr * r)).collect())
}

pub fn solve_blended(ss: &StateSpace, q: &Mat6, r: &Mat6, warm: Option<&DMatrix<f64>>) -> Result<RiccatiSolution> {
    let dm = |m: &Mat6| DMatrix::from_column_slice(6, 6, m.as_slice());
    solve_are(&dm(&ss.a), &dm(&ss.b), &dm(q), &dm(r), warm)
}

/// `u = −K(Y − Y_ref)`, stacked `[f_h, f_r]`.
pub fn control_input(sol: &RiccatiSolution, y: &Vec6, y_ref: &Vec6) -> Vec6 {
    let e = y - y_ref;
    let mut u = Vec6::zeros();
    for i in 0..6 {
        u[i] = -(0..6).map(|j| sol.gain[(i, j)] * e[j]).sum::<f64>();
    }
    u
}

/// Flat controller configuration; matrices are given by their diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    #[serde(rename = "M")]
    pub m: [f64; 3],
    #[serde(rename = "D")]
    pub d: [f64; 3],
    #[serde(rename = "K")]
    pub k: [f64; 3],
    #[serde(rename = "Q_hh")]
    pub q_hh: [f64; 6],
    #[serde(rename = "Q_hr")]
    pub q_hr: [f64; 6],
    #[serde(rename = "Q_rh")]
    pub q_rh: [f64; 6],
    #[serde(rename = "Q_rr")]
    pub q_rr: [f64; 6],
    #[serde(rename = "R_h")]
    pub r_h: [f64; 3],
    #[serde(rename = "R_r")]
    pub r_r: [f64; 3],
    pub alpha: f64,
    pub kappa_tol: f64,
    pub control_hz: f64,
    pub predict_hz: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let q = [1.0, 1.0, 1.0, 1e-4, 1e-4, 1e-4];
        Self {
            m: [10.0; 3],
            d: [100.0; 3],
            k: [200.0; 3],
            q_hh: q,
            q_hr: [0.0; 6],
            q_rh: [0.0; 6],
            q_rr: q,
            r_h: [5e-4; 3],
            r_r: [1e-4; 3],
            alpha: 0.3,
            kappa_tol: 1e-3,
            control_hz: 100.0,
            predict_hz: 50.0,
        }
    }
}

impl ControllerConfig {
    pub fn impedance(&self) -> ImpedanceParams {
        ImpedanceParams::diagonal(self.m.into(), self.d.into(), self.k.into())
    }

    pub fn weights(&self) -> CostWeights {
        let q = |d: [f64; 6]| Mat6::from_diagonal(&Vec6::from(d));
        let r = |d: [f64; 3]| Mat3::from_diagonal(&Vec3::from(d));
        CostWeights {
            q_hh: q(self.q_hh),
            q_hr: q(self.q_hr),
            q_rh: q(self.q_rh),
            q_rr: q(self.q_rr),
            r_h: r(self.r_h),
            r_r: r(self.r_r),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.impedance().validate()?;
        self.weights().validate()?;
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.kappa_tol >= 0.0) {
            return Err(Error::Config(format!("kappa_tol must be >= 0, got {}", self.kappa_tol)));
        }
        if !(self.control_hz > 0.0 && self.predict_hz > 0.0 && self.predict_hz <= self.control_hz) {
            return Err(Error::Config(format!(
                "need 0 < predict_hz <= control_hz, got {} / {}",
                self.predict_hz, self.control_hz
            )));
        }
        Ok(())
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    pub fn predict_period(&self) -> f64 {
        1.0 / self.predict_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationState {
    pub kappa: f64,
    pub alpha: f64,
    pub y_ref: Vec6,
    /// Stacked `[f_h_opt, f_r_opt]`; only the robot half is actuated.
    pub u: Vec6,
    pub stale: bool,
}

/// Output of one allocator tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    pub f_r: Vec3,
    pub state: AllocationState,
}

/// Stateful role allocator with a κ-keyed Riccati cache.
#[derive(Debug, Clone)]
pub struct Allocator {
    config: ControllerConfig,
    ss: StateSpace,
    weights: CostWeights,
    cache: Option<(f64, RiccatiSolution)>,
    solves: usize,
    last: Option<Tick>,
}

impl Allocator {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            ss: build_state_space(&config.impedance())?,
            weights: config.weights(),
            config,
            cache: None,
            solves: 0,
            last: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state_space(&self) -> &StateSpace {
        &self.ss
    }

    /// Number of Riccati solves so far.
    pub fn solve_count(&self) -> usize {
        self.solves
    }

    pub fn solution(&self) -> Option<&RiccatiSolution> {
        self.cache.as_ref().map(|(_, s)| s)
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        let mut cfg = self.config;
        cfg.alpha = alpha;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    fn ensure_solution(&mut self, kappa: f64) -> Result<()> {
        let fresh = matches!(&self.cache, Some((k, _)) if (k - kappa).abs() <= self.config.kappa_tol);
        if !fresh {
            let (q, r) = blend_costs(kappa, &self.weights)?;
            let warm = self.cache.as_ref().map(|(_, s)| s.p.clone());
            let sol = solve_blended(&self.ss, &q, &r, warm.as_ref())?;
            self.solves += 1;
            self.cache = Some((kappa, sol));
        }
        Ok(())
    }

    /// One control step. `y_h`/`y_r` are the predicted human and robot
    /// states at the first horizon step and `prediction_age` is the time
    /// since they were produced. Stale predictions hold the previous robot
    /// force.
    pub fn tick(&mut self, f_h: &Vec3, y: &Vec6, y_h: &Vec6, y_r: &Vec6, prediction_age: f64) -> Result<Tick> {
        let kappa = kappa_from_force(f_h, self.config.alpha);
        self.tick_with_kappa(kappa, y, y_h, y_r, prediction_age)
    }

    /// As [`Allocator::tick`] with an externally chosen role coefficient.
    pub fn tick_with_kappa(&mut self, kappa: f64, y: &Vec6, y_h: &Vec6, y_r: &Vec6, prediction_age: f64) -> Result<Tick> {
        check_kappa(kappa)?;
        let limit = self.config.predict_period() + 1e-9;
        if !(prediction_age <= limit) {
            let prev = self.last.unwrap_or(Tick {
                f_r: Vec3::zeros(),
                state: AllocationState {
                    kappa,
                    alpha: self.config.alpha,
                    y_ref: *y,
                    u: Vec6::zeros(),
                    stale: true,
                },
            });
            let tick = Tick {
                f_r: prev.f_r,
                state: AllocationState {
                    kappa,
                    alpha: self.config.alpha,
                    stale: true,
                    ..prev.state
                },
            };
            self.last = Some(tick);
            return Ok(tick);
        }
        self.ensure_solution(kappa)?;
        let y_ref = compose_reference(kappa, &[*y_h], &[*y_r], &self.weights)?[0];
        let sol = &self.cache.as_ref().expect("solved above").1;
        let u = control_input(sol, y, &y_ref);
        let tick = Tick {
            f_r: Vec3::new(u[3], u[4], u[5]),
            state: AllocationState {
                kappa,
                alpha: self.config.alpha,
                y_ref,
                u,
                stale: false,
            },
        };
        self.last = Some(tick);
        Ok(tick)
    }
}

#[cfg(test)]
mod tests;
