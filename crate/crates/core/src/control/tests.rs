use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn defaults() -> (ControllerConfig, StateSpace, CostWeights) {
    let cfg = ControllerConfig::default();
    let ss = build_state_space(&cfg.impedance()).unwrap();
    (cfg, ss, cfg.weights())
}

fn dm(m: &Mat6) -> DMatrix<f64> {
    DMatrix::from_column_slice(6, 6, m.as_slice())
}

#[test]
fn state_space_blocks() {
    let unit = ImpedanceParams::diagonal(Vec3::repeat(1.0), Vec3::repeat(1.0), Vec3::repeat(1.0));
    let ss = build_state_space(&unit).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            assert_eq!(ss.a[(i, j)], 0.0);
            assert_eq!(ss.a[(i, j + 3)], id);
            assert_eq!(ss.a[(i + 3, j)], -id);
            assert_eq!(ss.a[(i + 3, j + 3)], -id);
            assert_eq!(ss.b[(i, j)], 0.0);
            assert_eq!(ss.b[(i, j + 3)], 0.0);
            assert_eq!(ss.b[(i + 3, j)], id);
            assert_eq!(ss.b[(i + 3, j + 3)], id);
        }
    }
    let (_, ss, _) = defaults();
    for i in 0..3 {
        assert_eq!(ss.a[(i + 3, i)], -20.0);
        assert_eq!(ss.a[(i + 3, i + 3)], -10.0);
        assert_eq!(ss.b[(i + 3, i)], 0.1);
    }
    let bad = ImpedanceParams::diagonal(Vec3::new(0.0, 1.0, 1.0), Vec3::repeat(1.0), Vec3::repeat(1.0));
    assert!(matches!(build_state_space(&bad), Err(Error::Config(_))));
}

#[test]
fn kappa_values() {
    assert_eq!(kappa_from_force(&Vec3::zeros(), 0.3), 0.5);
    let k10 = kappa_from_force(&Vec3::new(6.0, 8.0, 0.0), 0.3);
    assert!((k10 - 1.0 / (1.0 + libm::exp(-3.0))).abs() < 1e-15);
    assert!((k10 - 0.95257).abs() < 1e-5);
    assert!(1.0 - kappa_from_force(&Vec3::new(0.0, 0.0, 40.0), 0.3) < 1e-5);
    let mut prev = 0.5;
    for i in 1..200 {
        let k = kappa_from_force(&Vec3::new(0.1 * i as f64, 0.0, 0.0), 0.3);
        assert!(k > prev && k < 1.0);
        prev = k;
    }
}

#[test]
fn blended_costs() {
    let (_, _, w) = defaults();
    let (q, r) = blend_costs(0.5, &w).unwrap();
    assert!((q - w.q_hh).norm() < 1e-15);
    for i in 0..3 {
        assert!((r[(i, i)] - 0.00025).abs() < 1e-15);
        assert!((r[(i + 3, i + 3)] - 0.00005).abs() < 1e-15);
    }
    assert!(blend_costs(0.0, &w).is_err());
    assert!(blend_costs(1.0, &w).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut psd = || {
        let g = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        g * g.transpose()
    };
    for _ in 0..20 {
        let w = CostWeights {
            q_hh: psd(),
            q_hr: psd(),
            q_rh: psd(),
            q_rr: psd(),
            r_h: Mat3::identity(),
            r_r: Mat3::identity(),
        };
        let (q, _) = blend_costs(0.37, &w).unwrap();
        assert!((q - q.transpose()).norm() < 1e-12);
        assert!(q.symmetric_eigenvalues().min() > -1e-12);
    }
}

#[test]
fn reference_limits_and_equivariance() {
    let (_, _, w) = defaults();
    let yh = vec![Vec6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3), Vec6::new(-1.0, 0.5, 0.0, 0.0, 0.0, 1.0)];
    let yr = vec![Vec6::new(0.0, -2.0, 1.0, 0.4, 0.0, 0.0), Vec6::new(2.0, 2.0, 2.0, -1.0, 0.0, 0.0)];
    let hi = compose_reference(1.0 - 1e-12, &yh, &yr, &w).unwrap();
    let lo = compose_reference(1e-12, &yh, &yr, &w).unwrap();
    let mid = compose_reference(0.5, &yh, &yr, &w).unwrap();
    for t in 0..2 {
        assert!((hi[t] - yh[t]).norm() < 1e-9);
        assert!((lo[t] - yr[t]).norm() < 1e-9);
        assert!((mid[t] - (yh[t] + yr[t]) / 2.0).norm() < 1e-12);
    }
    let shift = Vec6::new(0.3, -1.2, 5.0, 0.0, 0.0, 0.0);
    for kappa in [0.5, 0.73, 0.99] {
        let base = compose_reference(kappa, &yh, &yr, &w).unwrap();
        let sh: Vec<Vec6> = yh.iter().map(|y| y + shift).collect();
        let sr: Vec<Vec6> = yr.iter().map(|y| y + shift).collect();
        let moved = compose_reference(kappa, &sh, &sr, &w).unwrap();
        for t in 0..2 {
            assert!((moved[t] - base[t] - shift).norm() < 1e-9);
        }
    }
    assert!(compose_reference(0.5, &yh, &yr[..1], &w).is_err());
}

#[test]
fn default_riccati_solution() {
    let (_, ss, w) = defaults();
    for kappa in [0.5, 0.8, 0.999] {
        let (q, r) = blend_costs(kappa, &w).unwrap();
        let sol = solve_blended(&ss, &q, &r, None).unwrap();
        assert!(sol.residual < 1e-6, "residual {}", sol.residual);
        assert!((&sol.p - sol.p.transpose()).norm() < 1e-10);
        assert!(sol.p.clone().symmetric_eigen().eigenvalues.min() > -1e-10);
        assert!(is_hurwitz(&(dm(&ss.a) - dm(&ss.b) * &sol.gain)));
    }
}

/// Quadratic cost `∫ YᵀQY + uᵀRu dt` of `u = −K Y` from `y0` over 10 s (RK4).
fn regulation_cost(ss: &StateSpace, q: &Mat6, r: &Mat6, k: &Mat6, y0: &Vec6) -> f64 {
    let closed = ss.a - ss.b * k;
    let weight = q + k.transpose() * r * k;
    let dt = 1e-3;
    let f = |y: &Vec6| closed * y;
    let l = |y: &Vec6| y.dot(&(weight * y));
    let mut y = *y0;
    let mut cost = 0.0;
    for _ in 0..10_000 {
        let k1 = f(&y);
        let y2 = y + k1 * (dt / 2.0);
        let k2 = f(&y2);
        let y3 = y + k2 * (dt / 2.0);
        let k3 = f(&y3);
        let y4 = y + k3 * dt;
        let k4 = f(&y4);
        cost += dt / 6.0 * (l(&y) + 2.0 * l(&y2) + 2.0 * l(&y3) + l(&y4));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    cost
}

#[test]
fn lqr_gain_beats_perturbations() {
    let (_, ss, w) = defaults();
    let (q, r) = blend_costs(0.5, &w).unwrap();
    let sol = solve_blended(&ss, &q, &r, None).unwrap();
    let k = Mat6::from_column_slice(sol.gain.as_slice());
    let y0 = Vec6::new(0.05, -0.03, 0.02, 0.1, 0.0, -0.05);
    let best = regulation_cost(&ss, &q, &r, &k, &y0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tried = 0;
    while tried < 20 {
        let dir = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let dk = dir * (rng.random_range(0.01..0.1) * k.norm() / dir.norm());
        let kp = k + dk;
        if !is_hurwitz(&dm(&(ss.a - ss.b * kp))) {
            continue;
        }
        tried += 1;
        assert!(regulation_cost(&ss, &q, &r, &kp, &y0) >= best - 1e-9);
    }
}

#[test]
fn control_input_properties() {
    let (_, ss, w) = defaults();
    let (q, r) = blend_costs(0.5, &w).unwrap();
    let sol = solve_blended(&ss, &q, &r, None).unwrap();
    let y = Vec6::new(0.1, 0.2, -0.1, 0.0, 0.3, 0.0);
    assert_eq!(control_input(&sol, &y, &y), Vec6::zeros());
    let e = Vec6::new(0.01, -0.02, 0.0, 0.05, 0.0, 0.1);
    let u1 = control_input(&sol, &e, &Vec6::zeros());
    let u2 = control_input(&sol, &(e * 2.0), &Vec6::zeros());
    assert!((u2 - u1 * 2.0).norm() < 1e-12 * u2.norm());
    let u = control_input(&sol, &Vec6::new(0.01, 0.0, 0.0, 0.0, 0.0, 0.0), &Vec6::zeros());
    assert!(u[3] < 0.0);
    // One plant step under that effort moves the position error back toward zero.
    let dt = 0.01;
    let mut state = Vec6::new(0.01, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut robot_only = Vec6::zeros();
    robot_only.fixed_rows_mut::<3>(3).copy_from(&u.fixed_rows::<3>(3));
    for _ in 0..5 {
        state += (ss.a * state + ss.b * robot_only) * dt;
    }
    assert!(state[0] < 0.01);
}

#[test]
fn allocator_tick_contracts() {
    let (cfg, ss, w) = defaults();
    let mut alloc = Allocator::new(cfg).unwrap();
    let y = Vec6::new(0.0, 0.0, 0.0, 0.1, 0.0, 0.0);
    let pred = Vec6::new(0.02, 0.01, 0.0, 0.2, 0.1, 0.0);
    let tick = alloc.tick(&Vec3::zeros(), &y, &pred, &pred, 0.0).unwrap();
    assert_eq!(tick.state.kappa, 0.5);
    let (q, r) = blend_costs(0.5, &w).unwrap();
    let sol = solve_blended(&ss, &q, &r, None).unwrap();
    let pure = control_input(&sol, &y, &pred);
    assert!((tick.f_r - Vec3::new(pure[3], pure[4], pure[5])).norm() < 1e-9 * pure.norm().max(1.0));
    assert_eq!(alloc.solve_count(), 1);

    // A force below the κ tolerance reuses the cached solution.
    let small = alloc.tick(&Vec3::new(0.01, 0.0, 0.0), &y, &pred, &pred, 0.0).unwrap();
    assert!(small.state.kappa > 0.5 && small.state.kappa - 0.5 < 1e-3);
    assert_eq!(alloc.solve_count(), 1);
    let big = alloc.tick(&Vec3::new(5.0, 0.0, 0.0), &y, &pred, &pred, 0.0).unwrap();
    assert!(big.state.kappa > small.state.kappa);
    assert_eq!(alloc.solve_count(), 2);

    let stale = alloc.tick(&Vec3::new(5.0, 0.0, 0.0), &y, &pred, &Vec6::zeros(), 0.5).unwrap();
    assert!(stale.state.stale);
    assert_eq!(stale.f_r, big.f_r);
    assert_eq!(alloc.solve_count(), 2);
}

proptest::proptest! {
    #[test]
    fn kappa_stays_in_range(f in 0.0f64..1e3, alpha in 0.01f64..2.0) {
        let k = kappa_from_force(&Vec3::new(f, 0.0, 0.0), alpha);
        proptest::prop_assert!((0.5..=1.0).contains(&k));
        proptest::prop_assert!(k >= kappa_from_force(&Vec3::new(f * 0.5, 0.0, 0.0), alpha));
    }
}
