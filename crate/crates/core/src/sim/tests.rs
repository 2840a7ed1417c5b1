use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::control::ControllerConfig;
use crate::intent::ConstantVelocity;
use crate::trajectory::Branch;

fn default_imp() -> ImpedanceParams {
    ControllerConfig::default().impedance()
}

fn cv(branch: Branch) -> ConstantVelocity {
    ConstantVelocity {
        branch,
        obs_len: 8,
        fut_len: 12,
    }
}

#[test]
fn human_force_statics_and_clamp() {
    let limb = HumanLimb {
        d_h: [1e-12; 3],
        k_h: [100.0; 3],
    };
    let x = Vec3::new(0.1, 0.2, 0.3);
    assert_eq!(human_force(&limb, &x, &Vec3::zeros(), &x, &Vec3::zeros(), 50.0), Vec3::zeros());
    let f = human_force(&limb, &x, &Vec3::zeros(), &(x + Vec3::new(0.05, 0.0, 0.0)), &Vec3::zeros(), 50.0);
    assert!((f - Vec3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
    let off = Vec3::new(0.3, 0.4, 0.0) * 0.6;
    let raw = human_force(&limb, &Vec3::zeros(), &Vec3::zeros(), &off, &Vec3::zeros(), 1e9);
    let clamped = human_force(&limb, &Vec3::zeros(), &Vec3::zeros(), &off, &Vec3::zeros(), raw.norm() / 3.0);
    assert!((clamped.norm() - raw.norm() / 3.0).abs() < 1e-12);
    assert!((clamped.normalize() - raw.normalize()).norm() < 1e-12);
}

#[test]
fn plant_equilibrium_and_statics() {
    let imp = default_imp();
    let x = Vec3::new(0.1, -0.2, 0.3);
    let z = Vec3::zeros();
    assert_eq!(plant_step(&imp, &x, &z, &x, &z, &z, &z, 0.01).unwrap(), (x, z));
    let f = Vec3::new(4.0, -2.0, 1.0);
    let (mut p, mut v) = (z, z);
    for _ in 0..500 {
        (p, v) = plant_step(&imp, &p, &v, &z, &z, &f, &z, 0.01).unwrap();
    }
    let expected = f / 200.0;
    assert!((p - expected).norm() < 0.01 * expected.norm());
    assert!(plant_step(&imp, &x, &z, &x, &z, &z, &z, 0.0).is_err());
}

#[test]
fn plant_converges_at_first_order() {
    let imp = default_imp();
    let run = |dt: f64| {
        let steps = libm::round(1.0 / dt) as usize;
        let (mut x, mut v) = (Vec3::new(0.05, 0.0, -0.02), Vec3::new(0.0, 0.3, 0.0));
        for i in 0..steps {
            let t = i as f64 * dt;
            let f = Vec3::new(libm::sin(3.0 * t), 2.0, 0.0);
            (x, v) = plant_step(&imp, &x, &v, &Vec3::zeros(), &Vec3::zeros(), &f, &Vec3::zeros(), dt).unwrap();
        }
        x
    };
    let (a, b, c) = (run(0.01), run(0.005), run(0.0025));
    let ratio = (a - b).norm() / (b - c).norm();
    assert!((ratio - 2.0).abs() < 0.1, "Richardson ratio {ratio}");
}

#[test]
fn unforced_energy_does_not_grow() {
    let imp = default_imp();
    let energy = |e: &Vec3, de: &Vec3| 0.5 * de.dot(&(imp.m * de)) + 0.5 * e.dot(&(imp.k * e));
    let x_ref = Vec3::new(0.2, 0.1, 0.0);
    for start in [Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.2, 0.4, -0.1), Vec3::new(-0.5, 0.0, 0.2)] {
        for v0 in [Vec3::zeros(), Vec3::new(1.0, -2.0, 0.5)] {
            let (mut x, mut v) = (start, v0);
            let mut prev = energy(&(x - x_ref), &v);
            let scale = prev.max(1.0);
            for _ in 0..400 {
                (x, v) = plant_step(&imp, &x, &v, &x_ref, &Vec3::zeros(), &Vec3::zeros(), &Vec3::zeros(), 0.01).unwrap();
                let e = energy(&(x - x_ref), &v);
                assert!(e <= prev + 1e-9 * scale, "{e} > {prev}");
                prev = e;
            }
        }
    }
}

#[test]
fn free_scenario_has_no_human_force() {
    let (r, h) = (cv(Branch::Robot), cv(Branch::Human));
    let log = run_episode(
        &Scenario::free(),
        &ControllerConfig::default(),
        &r,
        &h,
        &EpisodeOptions::default(),
        1,
    )
    .unwrap();
    assert!(log.header.failure.is_none());
    assert_eq!(log.ticks.len(), 501);
    assert!(log.ticks.iter().all(|t| t.f_h == Vec3::zeros() && t.kappa == 0.5));
    for w in log.ticks.windows(2) {
        assert!((w[1].t - w[0].t - 0.01).abs() < 1e-12);
    }
    let end = log.ticks.last().unwrap().x;
    assert!((end - Scenario::free().goal).norm() < 0.01);
}

#[test]
fn episodes_are_deterministic() {
    let (r, h) = (cv(Branch::Robot), cv(Branch::Human));
    let mut scenario = Scenario::standard(3);
    scenario.human.force_noise = 0.5;
    let opts = EpisodeOptions {
        record_predictions: true,
        ..EpisodeOptions::default()
    };
    let cfg = ControllerConfig::default();
    let a = run_episode(&scenario, &cfg, &r, &h, &opts, 11).unwrap();
    let b = run_episode(&scenario, &cfg, &r, &h, &opts, 11).unwrap();
    assert_eq!(a, b);
    let c = run_episode(&scenario, &cfg, &r, &h, &opts, 12).unwrap();
    assert_ne!(a, c);
    assert!(a.ticks.iter().any(|t| t.f_h.norm() > 0.0));
    assert!(a.ticks[0].pred_h.is_some() && a.ticks[1].pred_h.is_none());
}

#[test]
fn scenario_validation() {
    let mut s = Scenario::standard(0);
    s.obstacles[0].center = s.start;
    assert!(matches!(s.validate(), Err(Error::Config(_))));
    let mut s = Scenario::free();
    s.f_max = 0.0;
    assert!(s.validate().is_err());
    assert_eq!(Scenario::preset("standard-4"), Some(Scenario::standard(4)));
    assert!(Scenario::preset("nope").is_none());
}

#[test]
fn ade_fde_examples() {
    let gt = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
    assert_eq!(metric_ade(&gt, &gt).unwrap(), 0.0);
    assert_eq!(metric_fde(&gt, &gt).unwrap(), 0.0);
    let shifted: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(0.0, 0.005, 0.0)).collect();
    assert!((metric_ade(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);
    assert!((metric_fde(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);
    let two = vec![gt[0] + Vec3::new(0.003, 0.0, 0.0), gt[1] + Vec3::new(0.0, 0.0, 0.004)];
    assert!((metric_ade(&two, &gt).unwrap() - 3.5).abs() < 1e-12);
    assert!((metric_fde(&two, &gt).unwrap() - 4.0).abs() < 1e-12);
    assert!(metric_ade(&two[..1], &gt).is_err());
}

#[test]
fn phrc_metric_examples() {
    let x: Vec<Vec3> = (0..4).map(|i| Vec3::new(0.01 * i as f64, 0.0, 0.0)).collect();
    let fh = vec![Vec3::new(1.0, 0.0, 0.0); 4];
    let m = phrc_from_series(&x, &fh, &fh, true);
    assert_eq!(m.theta, Some(0.0));
    assert_eq!(m.iasst, Some(1.0));
    assert_eq!(m.mu, Some(1.0));
    assert!((m.work - 0.03).abs() < 1e-15);

    let fr: Vec<Vec3> = fh.iter().map(|f| -f * 2.0).collect();
    let m = phrc_from_series(&x, &fh, &fr, true);
    assert!((m.theta.unwrap() - 180.0).abs() < 1e-12);
    assert_eq!(m.mu, Some(0.0));
    assert_eq!(m.iasst, Some(-2.0));

    let ortho = vec![Vec3::new(0.0, 3.0, 0.0); 4];
    let m = phrc_from_series(&x, &fh, &ortho, true);
    assert!((m.theta.unwrap() - 90.0).abs() < 1e-12);
    assert_eq!(m.mu, Some(0.0));
    assert_eq!(m.iasst, Some(0.0));

    let quiet = vec![Vec3::new(0.1, 0.0, 0.0); 4];
    let m = phrc_from_series(&x, &quiet, &fh, true);
    assert_eq!((m.theta, m.iasst, m.mu, m.included_ticks), (None, None, None, 0));
    assert!((m.work - 0.003).abs() < 1e-15);
}
