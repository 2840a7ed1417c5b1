//! Predictor evaluation over a set of windows.

use std::fmt::Write as _;

use phrc_core::derive_seed;
use phrc_core::intent::{BranchModel, ConstantVelocity};
use phrc_core::sim::{metric_ade, metric_fde};
use phrc_core::trajectory::{slice_windows, Trajectory, WindowPair};
use phrc_core::Vec3;
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdeFde {
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub windows: usize,
    pub n: usize,
    pub best_of_n: AdeFde,
    pub most_likely: AdeFde,
    pub constant_velocity: AdeFde,
    /// Fraction of windows where best-of-n ADE ≤ most-likely ADE.
    pub best_not_worse: f64,
}

impl EvalSummary {
    /// Relative ADE improvement of most-likely over constant velocity.
    pub fn improvement_over_cv(&self) -> f64 {
        1.0 - self.most_likely.ade / self.constant_velocity.ade
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,ade_mm,fde_mm,windows\n");
        for (name, m) in self.rows() {
            writeln!(out, "{name},{},{},{}", m.ade, m.fde, self.windows).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<20} {:>10} {:>10}\n", "method", "ADE (mm)", "FDE (mm)");
        for (name, m) in self.rows() {
            writeln!(out, "{name:<20} {:>10.2} {:>10.2}", m.ade, m.fde).unwrap();
        }
        writeln!(out, "windows: {}", self.windows).unwrap();
        out
    }

    fn rows(&self) -> [(String, AdeFde); 3] {
        [
            (format!("best-of-{}", self.n), self.best_of_n),
            ("most-likely".into(), self.most_likely),
            ("constant-velocity".into(), self.constant_velocity),
        ]
    }
}

pub fn windows_of(trajs: &[Trajectory], obs_len: usize, fut_len: usize, stride: usize) -> Result<Vec<WindowPair>> {
    let mut out = Vec::new();
    for t in trajs {
        out.extend(slice_windows(t, obs_len, fut_len, stride)?);
    }
    Ok(out)
}

fn positions(steps: &[[f64; 6]]) -> Vec<Vec3> {
    steps.iter().map(|s| Vec3::new(s[0], s[1], s[2])).collect()
}

/// Most-likely, best-of-`n` and constant-velocity errors (mm). Window `i`
/// draws its candidates from `derive_seed(seed, i)`.
pub fn evaluate(model: &BranchModel, windows: &[WindowPair], n: usize, seed: u64) -> Result<EvalSummary> {
    if windows.is_empty() {
        return Err(phrc_core::Error::EmptyCorpus.into());
    }
    let fut_len = model.config().fut_len;
    let (mut ml, mut bo, mut cv) = ([0.0; 2], [0.0; 2], [0.0; 2]);
    let mut not_worse = 0usize;
    for (i, w) in windows.iter().enumerate() {
        let gt = w.future_positions();
        let pred = positions(&model.sample_most_likely(&w.past)?);
        let ml_ade = metric_ade(&pred, &gt)?;
        ml[0] += ml_ade;
        ml[1] += metric_fde(&pred, &gt)?;
        let (best, bo_ade) = model.sample_best_of_n(&w.past, n, &gt, derive_seed(seed, i as u64))?;
        bo[0] += bo_ade;
        bo[1] += metric_fde(&positions(&best), &gt)?;
        if bo_ade <= ml_ade {
            not_worse += 1;
        }
        let c = ConstantVelocity::rollout(&w.past, fut_len)?.positions();
        cv[0] += metric_ade(&c, &gt)?;
        cv[1] += metric_fde(&c, &gt)?;
    }
    let k = windows.len() as f64;
    let mean = |a: [f64; 2]| AdeFde { ade: a[0] / k, fde: a[1] / k };
    Ok(EvalSummary {
        windows: windows.len(),
        n,
        best_of_n: mean(bo),
        most_likely: mean(ml),
        constant_velocity: mean(cv),
        best_not_worse: not_worse as f64 / k,
    })
}
