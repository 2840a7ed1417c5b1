use std::time::{Duration, Instant};

use phrc_core::control::{kappa_from_force, ControllerConfig};
use phrc_core::datagen::gen_phrc;
use phrc_core::intent::{train, BranchModel, ModelConfig, Predictor, TrainOptions};
use phrc_core::nn::NetConfig;
use phrc_core::sim::{run_episode, ClosedLoop, EpisodeOptions, Scenario};
use phrc_core::trajectory::{slice_windows, Branch, Trajectory, WindowPair};
use phrc_core::Vec3;
use proptest::prelude::*;

fn net() -> NetConfig {
    NetConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        d_z: 4,
        n_mix: 2,
        dropout: 0.0,
    }
}

fn branch_windows(trajs: &[Trajectory], branch: Branch) -> Vec<WindowPair> {
    trajs
        .iter()
        .filter(|t| t.branch() == branch)
        .flat_map(|t| slice_windows(t, 8, 12, 6).unwrap())
        .collect()
}

#[test]
fn trained_models_drive_a_full_episode() {
    let trajs = gen_phrc(3, 4, 0.02, 1).unwrap();
    let opts = TrainOptions {
        epochs: 2,
        seed: 2,
        ..TrainOptions::default()
    };
    let mut robot = BranchModel::new(ModelConfig::new(Branch::Robot, net()), 3).unwrap();
    let mut human = BranchModel::new(ModelConfig::new(Branch::Human, net()), 4).unwrap();
    let r = train(&mut robot, &branch_windows(&trajs, Branch::Robot), &opts).unwrap();
    let h = train(&mut human, &branch_windows(&trajs, Branch::Human), &opts).unwrap();
    assert_eq!(r.epochs.len(), 2);
    assert!(h.epochs.iter().all(|e| e.loss.is_finite()));

    let options = EpisodeOptions {
        window_stride: 2,
        record_predictions: true,
        ..EpisodeOptions::default()
    };
    let cfg = ControllerConfig::default();
    let log = run_episode(&Scenario::standard(1), &cfg, &robot, &human, &options, 1).unwrap();
    assert!(log.header.failure.is_none(), "{:?}", log.header.failure);
    assert!(log.ticks.iter().all(|t| t.x.iter().all(|v| v.is_finite())));
    let refreshed = log.ticks.iter().filter(|t| t.pred_h.is_some()).count();
    // Predictions refresh every other control tick.
    assert!(refreshed.abs_diff(log.ticks.len() / 2) <= 1, "{refreshed} of {}", log.ticks.len());
    assert!(log.ticks.iter().filter_map(|t| t.pred_r.as_ref()).all(|p| p.len() == 12));

    let again = run_episode(&Scenario::standard(1), &cfg, &robot, &human, &options, 1).unwrap();
    assert_eq!(again.ticks, log.ticks);
}

#[test]
fn control_tick_fits_the_real_time_budget() {
    let robot = BranchModel::new(ModelConfig::new(Branch::Robot, NetConfig::default()), 1).unwrap();
    let human = BranchModel::new(ModelConfig::new(Branch::Human, NetConfig::default()), 2).unwrap();
    assert_eq!(robot.obs_len(), 8);
    let options = EpisodeOptions {
        window_stride: 2,
        ..EpisodeOptions::default()
    };
    let mut sim =
        ClosedLoop::new(Scenario::standard(0), ControllerConfig::default(), &robot, &human, options, 0).unwrap();
    for _ in 0..10 {
        sim.step(Some(Vec3::new(0.0, 5.0, 0.0))).unwrap();
    }
    let mut times: Vec<Duration> = (0..200)
        .map(|i| {
            let started = Instant::now();
            sim.step(Some(Vec3::new(0.0, (i % 20) as f64, 0.0))).unwrap();
            started.elapsed()
        })
        .collect();
    times.sort();
    let median = times[times.len() / 2];
    assert!(median < Duration::from_millis(10), "median tick {median:?}");
}

proptest! {
    #[test]
    fn kappa_is_monotone_in_force_magnitude(a in 0.0f64..50.0, b in 0.0f64..50.0, alpha in 0.01f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let k_lo = kappa_from_force(&Vec3::new(lo, 0.0, 0.0), alpha);
        let k_hi = kappa_from_force(&Vec3::new(0.0, 0.0, -hi), alpha);
        prop_assert!((0.5..1.0).contains(&k_lo) || k_lo == 1.0);
        prop_assert!(k_lo <= k_hi);
    }
}
