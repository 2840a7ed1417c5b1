use alloc::format;

use serde::{Deserialize, Serialize};

use super::EpisodeLog;
use crate::{Error, Result, Vec3};

/// Ticks with `‖f_h‖` above this count as human-guided.
pub const GUIDED_FORCE_EPS: f64 = 0.5;

fn check_lengths(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Validation(format!(
            "prediction and ground truth lengths must match and be non-empty ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Average displacement error in mm (inputs in m).
pub fn metric_ade(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_lengths(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).sum();
    Ok(1e3 * sum / pred.len() as f64)
}

/// Final displacement error in mm (inputs in m).
pub fn metric_fde(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_lengths(pred, gt)?;
    Ok(1e3 * (pred[pred.len() - 1] - gt[gt.len() - 1]).norm())
}

/// Collaboration metrics. The angle-based ones are absent when no tick
/// qualifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhrcMetrics {
    /// Mean angle between robot and human force (degrees).
    pub theta: Option<f64>,
    /// Mean projection of the robot force on the human force direction (N).
    pub iasst: Option<f64>,
    /// Fraction of included ticks with θ < 90°.
    pub mu: Option<f64>,
    /// `Σ f_h · Δx` over the whole episode (J).
    pub work: f64,
    pub included_ticks: usize,
}

/// Running form of [`phrc_from_series`], fed one tick at a time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhrcAccumulator {
    threshold: f64,
    theta_sum: f64,
    iasst_sum: f64,
    aligned: usize,
    n: usize,
    work: f64,
    /// Position and human force of the previous tick.
    prev: Option<(Vec3, Vec3)>,
}

impl PhrcAccumulator {
    pub fn new(guided_only: bool) -> Self {
        Self {
            threshold: if guided_only { GUIDED_FORCE_EPS } else { 0.0 },
            theta_sum: 0.0,
            iasst_sum: 0.0,
            aligned: 0,
            n: 0,
            work: 0.0,
            prev: None,
        }
    }

    pub fn push(&mut self, x: &Vec3, f_h: &Vec3, f_r: &Vec3) {
        if let Some((px, pf)) = self.prev {
            self.work += pf.dot(&(x - px));
        }
        self.prev = Some((*x, *f_h));
        let nh = f_h.norm();
        if !(nh > self.threshold) {
            return;
        }
        let nr = f_r.norm();
        let theta = if nr > 0.0 {
            libm::acos((f_r.dot(f_h) / (nr * nh)).clamp(-1.0, 1.0)).to_degrees()
        } else {
            90.0
        };
        self.theta_sum += theta;
        self.iasst_sum += f_r.dot(f_h) / nh;
        if theta < 90.0 {
            self.aligned += 1;
        }
        self.n += 1;
    }

    pub fn metrics(&self) -> PhrcMetrics {
        let n = self.n;
        let avg = |s: f64| (n > 0).then(|| s / n as f64);
        PhrcMetrics {
            theta: avg(self.theta_sum),
            iasst: avg(self.iasst_sum),
            mu: avg(self.aligned as f64),
            work: self.work,
            included_ticks: n,
        }
    }
}

/// Metrics over aligned per-tick series. Tick `i`'s human force acts over
/// `x[i] → x[i+1]`. Included ticks are those with `‖f_h‖ > GUIDED_FORCE_EPS`
/// when `guided_only`, otherwise every tick with nonzero `f_h`. A zero robot
/// force counts as perpendicular. Series of unequal length are truncated to
/// the shortest.
pub fn phrc_from_series(x: &[Vec3], f_h: &[Vec3], f_r: &[Vec3], guided_only: bool) -> PhrcMetrics {
    let mut acc = PhrcAccumulator::new(guided_only);
    for ((x, fh), fr) in x.iter().zip(f_h).zip(f_r) {
        acc.push(x, fh, fr);
    }
    acc.metrics()
}

pub fn metric_phrc(log: &EpisodeLog, guided_only: bool) -> PhrcMetrics {
    let x: alloc::vec::Vec<Vec3> = log.ticks.iter().map(|r| r.x).collect();
    let f_h: alloc::vec::Vec<Vec3> = log.ticks.iter().map(|r| r.f_h).collect();
    let f_r: alloc::vec::Vec<Vec3> = log.ticks.iter().map(|r| r.f_r).collect();
    phrc_from_series(&x, &f_h, &f_r, guided_only)
}
