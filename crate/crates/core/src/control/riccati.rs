//! Continuous-time algebraic Riccati equation
//! `AᵀP + PA + Q − PBR⁻¹BᵀP = 0`.

use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::{Error, Result};

/// Residual target of the Newton iteration.
pub const NEWTON_TOL: f64 = 1e-9;
/// Solutions with a larger residual are rejected.
pub const ACCEPT_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: DMatrix<f64>,
    /// `R⁻¹BᵀP`.
    pub gain: DMatrix<f64>,
    /// Frobenius norm of the equation residual.
    pub residual: f64,
    pub iterations: usize,
}

pub fn are_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r_inv: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let res = a.transpose() * p + p * a + q - p * b * r_inv * b.transpose() * p;
    res.norm()
}

const SCHUR_MAX_ITERATIONS: usize = 1000;

/// Eigenvalues through a bounded real Schur decomposition; the unbounded
/// variant can cycle forever on some well-conditioned inputs. A rescaled
/// retry changes the shift sequence.
fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    let schur = |x: DMatrix<f64>| Schur::try_new(x, f64::EPSILON, SCHUR_MAX_ITERATIONS);
    if let Some(s) = schur(m.clone()) {
        return Some(s.complex_eigenvalues().iter().copied().collect());
    }
    let scale = m.norm();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let s = schur(m / (scale * core::f64::consts::SQRT_2))?;
    Some(s.complex_eigenvalues().iter().map(|l| l * (scale * core::f64::consts::SQRT_2)).collect())
}

/// Lyapunov test: `M` is Hurwitz iff `MᵀX + XM + I = 0` has a positive
/// definite solution.
fn is_hurwitz_lyapunov(m: &DMatrix<f64>) -> bool {
    let id = DMatrix::<f64>::identity(m.nrows(), m.ncols());
    match solve_lyapunov(m, &id) {
        Ok(x) => x.iter().all(|v| v.is_finite()) && ((&x + x.transpose()) * 0.5).cholesky().is_some(),
        Err(_) => false,
    }
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    match eigenvalues(m) {
        Some(ev) => ev.iter().all(|l| l.re < 0.0),
        None => is_hurwitz_lyapunov(m),
    }
}

/// Popov-Belevitch-Hautus test on the non-stable modes of `A`.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let scale = a.norm().max(b.norm()).max(1.0);
    let Some(ev) = eigenvalues(a) else { return false };
    ev.iter().filter(|l| l.re >= -1e-12 * scale).all(|&l| {
        let mut pbh = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                pbh[(i, j)] = Complex::new(a[(i, j)], 0.0) - if i == j { l } else { Complex::new(0.0, 0.0) };
            }
            for j in 0..b.ncols() {
                pbh[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pbh.singular_values();
        let tol = 1e-10 * scale * (n as f64);
        sv.iter().filter(|s| **s > tol).count() == n
    })
}

/// Solves `AᵀX + XA + C = 0` through its Kronecker form.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let mut big = DMatrix::<f64>::zeros(n * n, n * n);
    // Column-major vec: vec(AᵀX) = (I ⊗ Aᵀ) vec X, vec(XA) = (Aᵀ ⊗ I) vec X.
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            for k in 0..n {
                big[(row, j * n + k)] += at[(i, k)];
                big[(row, k * n + i)] += a[(k, j)];
            }
        }
    }
    let rhs = DVector::from_iterator(n * n, c.iter().map(|v| -v));
    let sol = big.lu().solve(&rhs).ok_or(Error::Singular("Lyapunov operator"))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// A stabilizing initial gain: zero when `A` is already Hurwitz, otherwise
/// Bass's construction.
fn initial_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if is_hurwitz(a) {
        return Some(DMatrix::zeros(b.ncols(), a.nrows()));
    }
    let n = a.nrows();
    let beta = a.norm() + 1.0;
    let shifted = a + DMatrix::<f64>::identity(n, n) * beta;
    // (A+βI)Z + Z(A+βI)ᵀ = 2BBᵀ, written for the transposed-operator solver.
    let z = solve_lyapunov(&shifted.transpose(), &(b * b.transpose() * -2.0)).ok()?;
    let k = b.transpose() * z.try_inverse()?;
    is_hurwitz(&(a - b * &k)).then_some(k)
}

/// Stabilizing solution from the matrix sign function of the Hamiltonian.
fn sign_function_solution(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut w = h;
    for _ in 0..MAX_ITERATIONS {
        let inv = w.clone().try_inverse().ok_or(Error::Singular("Hamiltonian sign iterate"))?;
        let det = w.clone().lu().determinant().abs();
        let c = if det > 0.0 && det.is_finite() {
            libm::pow(det, -1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let next = (&w * c + inv / c) * 0.5;
        let delta = (&next - &w).norm();
        let scale = next.norm();
        w = next;
        if delta <= 1e-13 * scale {
            break;
        }
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::<f64>::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::<f64>::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|_| Error::Singular("sign-function subspace"))?;
    Ok((&p + p.transpose()) * 0.5)
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Shape {
            op: "solve_are",
            expected: alloc::format!("A {n}x{n}, B {n}x{m}, Q {n}x{n}, R {m}x{m}"),
            got: alloc::format!("A {:?}, B {:?}, Q {:?}, R {:?}", a.shape(), b.shape(), q.shape(), r.shape()),
        });
    }
    Ok(())
}

/// Newton–Kleinman iteration from a stabilizing gain, optionally warm
/// started from a previous solution. Falls back to the Hamiltonian sign
/// function when no stabilizing start is available.
pub fn solve_are(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
) -> Result<RiccatiSolution> {
    check_shapes(a, b, q, r)?;
    if !is_stabilizable(a, b) {
        return Err(Error::NotStabilizable);
    }
    let r_inv = r.clone().try_inverse().ok_or(Error::Singular("R"))?;
    let g = b * &r_inv * b.transpose();
    let scale = q.norm().max(1.0);

    let warm_gain = warm
        .filter(|p| p.shape() == a.shape())
        .map(|p| &r_inv * b.transpose() * p)
        .filter(|k| is_hurwitz(&(a - b * k)));
    let mut k = match warm_gain.or_else(|| initial_gain(a, b)) {
        Some(k) => k,
        None => {
            let p0 = sign_function_solution(a, &g, q)?;
            &r_inv * b.transpose() * p0
        }
    };

    let mut p = DMatrix::<f64>::zeros(a.nrows(), a.nrows());
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=MAX_ITERATIONS {
        iterations = it;
        let ac = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let next = solve_lyapunov(&ac, &c)?;
        let step = (&next - &p).norm();
        p = next;
        k = &r_inv * b.transpose() * &p;
        residual = are_residual(a, b, q, &r_inv, &p);
        if residual <= NEWTON_TOL * scale || step <= 1e-14 * p.norm().max(1.0) {
            break;
        }
    }
    if !(residual < ACCEPT_TOL) || !is_hurwitz(&(a - b * &k)) {
        return Err(Error::NoConvergence { iterations, residual });
    }
    Ok(RiccatiSolution {
        p,
        gain: k,
        residual,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn scalar_are() {
        let sol = solve_are(&m(1, 1, &[0.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0]), None).unwrap();
        assert!((sol.p[(0, 0)] - 1.0).abs() < 1e-8);
        assert!((sol.gain[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn double_integrator_are() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let sol = solve_are(&a, &b, &DMatrix::identity(2, 2), &m(1, 1, &[1.0]), None).unwrap();
        let s3 = libm::sqrt(3.0);
        let expected = m(2, 2, &[s3, 1.0, 1.0, s3]);
        assert!((&sol.p - &expected).norm() < 1e-8, "{}", sol.p);
        assert!(sol.residual < 1e-9);
    }

    #[test]
    fn sign_function_matches_newton() {
        let a = m(2, 2, &[0.0, 1.0, 2.0, -0.5]);
        let b = m(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = m(1, 1, &[0.5]);
        let newton = solve_are(&a, &b, &q, &r, None).unwrap();
        let g = &b * r.clone().try_inverse().unwrap() * b.transpose();
        let sign = sign_function_solution(&a, &g, &q).unwrap();
        assert!((&newton.p - &sign).norm() < 1e-8);
    }

    #[test]
    fn unstabilizable_pair_is_rejected() {
        // The second mode is unstable and not reachable from the input.
        let a = m(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        let b = m(2, 1, &[1.0, 0.0]);
        let err = solve_are(&a, &b, &DMatrix::identity(2, 2), &m(1, 1, &[1.0]), None).unwrap_err();
        assert_eq!(err, Error::NotStabilizable);
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = m(3, 3, &[-2.0, 1.0, 0.0, 0.3, -1.0, 0.5, 0.0, -0.2, -3.0]);
        let c = m(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.3, 0.0, 0.3, 4.0]);
        let x = solve_lyapunov(&a, &c).unwrap();
        assert!((a.transpose() * &x + &x * &a + c).norm() < 1e-12);
    }
}
