//! Steady-state Riccati solvers for the LQR controller and the Kalman filter.
//!
//! Both solvers run the plain fixed-point (value) iteration of the
//! corresponding finite-horizon recursion until successive iterates stop
//! moving, which keeps each step a direct transcription of the recursion.

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::sysmodel::LinearPlant;

pub const TOLERANCE: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("{which} Riccati iteration did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NotConverged {
        which: &'static str,
        iterations: usize,
        last_change: f64,
    },
    #[error("filter requires Gaussian noises")]
    NonGaussian,
    #[error("filter requires a partially observed plant (observation noise present)")]
    FullyObserved,
    #[error("iteration produced non-finite values")]
    NonFinite,
}

/// Solution of `S = Q + A^T (S - M) A` with
/// `M = S B (R + B^T S B)^{-1} B^T S` and `L = (R + B^T S B)^{-1} B^T S`.
#[derive(Debug, Clone, Serialize)]
pub struct ControlRiccati {
    pub s: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub l: DMatrix<f64>,
    /// `R + B^T S B`, the weight on control mismatch.
    pub g: DMatrix<f64>,
    pub iterations: usize,
    /// Frobenius norm of `S - Q - A^T (S - M) A` at the returned solution.
    pub residual: f64,
    /// Set when `R + B^T S B` was singular and a pseudoinverse was used.
    pub pseudo_inverse_used: bool,
}

impl ControlRiccati {
    /// Weight of the innovation distortion, `A^T M A`.
    pub fn weight(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&(a.transpose() * &self.m * a))
    }
}

/// Steady-state Kalman filter quantities.
#[derive(Debug, Clone, Serialize)]
pub struct FilterRiccati {
    /// A-priori error covariance `P`.
    pub p: DMatrix<f64>,
    /// Gain `K = P C^T (C P C^T + Σ_W)^{-1}`.
    pub k: DMatrix<f64>,
    /// A-posteriori error covariance `Σ = P - K (C P C^T + Σ_W) K^T`.
    pub sigma: DMatrix<f64>,
    /// Covariance of the estimate's innovation, `N = K (C P C^T + Σ_W) K^T`.
    pub n: DMatrix<f64>,
    /// Covariance of the output innovation, `C P C^T + Σ_W`.
    pub output_innovation: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn inverse_or_pinv(g: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = linalg::symmetrize(g);
    let ev = linalg::sym_eigenvalues(&sym);
    let scale = ev.iter().fold(1.0_f64, |a, e| a.max(e.abs()));
    if ev.first().copied().unwrap_or(0.0) > 1e-12 * scale {
        if let Some(inv) = sym.clone().try_inverse() {
            return (inv, false);
        }
    }
    (linalg::pinv(&sym), true)
}

fn control_terms(plant: &LinearPlant, s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, bool) {
    let bt = plant.b.transpose();
    let g = &plant.r + &bt * s * &plant.b;
    let (ginv, pinv_used) = inverse_or_pinv(&g);
    let l = &ginv * &bt * s;
    let m = linalg::symmetrize(&(s * &plant.b * &l));
    (m, l, linalg::symmetrize(&g), pinv_used)
}

/// Value iteration `S <- Q + A^T (S - S B (R + B^T S B)^{-1} B^T S) A` from `S = Q`.
pub fn solve_control(plant: &LinearPlant) -> Result<ControlRiccati, RiccatiError> {
    let a = &plant.a;
    let at = a.transpose();
    let mut s = linalg::symmetrize(&plant.q);
    let mut any_pinv = false;
    let mut last_change = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let (m, _, _, pinv_used) = control_terms(plant, &s);
        any_pinv |= pinv_used;
        let next = linalg::symmetrize(&(&plant.q + &at * (&s - &m) * a));
        if !next.iter().all(|x| x.is_finite()) {
            return Err(RiccatiError::NonFinite);
        }
        last_change = linalg::frobenius(&(&next - &s));
        let scale = linalg::frobenius(&next).max(1.0);
        s = next;
        if last_change < TOLERANCE * scale {
            let (m, l, g, pinv_used) = control_terms(plant, &s);
            let residual = linalg::frobenius(&(&s - &plant.q - &at * (&s - &m) * a));
            return Ok(ControlRiccati {
                s,
                m,
                l,
                g,
                iterations: it,
                residual,
                pseudo_inverse_used: any_pinv || pinv_used,
            });
        }
    }
    Err(RiccatiError::NotConverged {
        which: "control",
        iterations: MAX_ITERATIONS,
        last_change,
    })
}

fn filter_terms(plant: &LinearPlant, p: &DMatrix<f64>, sigma_w: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let ct = plant.c.transpose();
    let out = linalg::symmetrize(&(&plant.c * p * &ct + sigma_w));
    let (inv, _) = inverse_or_pinv(&out);
    let k = p * &ct * inv;
    (k, out)
}

/// Iterates `P <- A (P - K (C P C^T + Σ_W) K^T) A^T + Σ_V` from `P = Σ_{X1}`.
pub fn solve_filter(plant: &LinearPlant) -> Result<FilterRiccati, RiccatiError> {
    let noise_w = plant.noise_w.as_ref().ok_or(RiccatiError::FullyObserved)?;
    if !plant.is_gaussian() {
        return Err(RiccatiError::NonGaussian);
    }
    let a = &plant.a;
    let at = a.transpose();
    let sigma_v = plant.noise_v.covariance();
    let sigma_w = noise_w.covariance();
    let mut p = linalg::symmetrize(plant.noise_x1.covariance());
    let mut last_change = f64::INFINITY;
    for it in 1..=MAX_ITERATIONS {
        let (k, out) = filter_terms(plant, &p, sigma_w);
        let post = &p - &k * &out * k.transpose();
        let next = linalg::symmetrize(&(a * post * &at + sigma_v));
        if !next.iter().all(|x| x.is_finite()) {
            return Err(RiccatiError::NonFinite);
        }
        last_change = linalg::frobenius(&(&next - &p));
        let scale = linalg::frobenius(&next).max(1.0);
        p = next;
        if last_change < TOLERANCE * scale {
            let (k, out) = filter_terms(plant, &p, sigma_w);
            let n = linalg::symmetrize(&(&k * &out * k.transpose()));
            let sigma = linalg::symmetrize(&(&p - &n));
            let residual = linalg::frobenius(&(&p - a * &sigma * &at - sigma_v));
            return Ok(FilterRiccati {
                p,
                k,
                sigma,
                n,
                output_innovation: out,
                iterations: it,
                residual,
            });
        }
    }
    Err(RiccatiError::NotConverged {
        which: "filter",
        iterations: MAX_ITERATIONS,
        last_change,
    })
}

/// Minimum cost without communication constraints: `tr(Σ_V S)` plus, when a
/// filter is supplied, the estimation penalty `tr(Σ A^T M A)`.
pub fn b_min(plant: &LinearPlant, control: &ControlRiccati, filter: Option<&FilterRiccati>) -> f64 {
    let base = (plant.noise_v.covariance() * &control.s).trace();
    match filter {
        Some(f) => base + (&f.sigma * control.weight(&plant.a)).trace(),
        None => base,
    }
}

/// A plant together with its steady-state solutions and `b_min`.
#[derive(Debug, Clone)]
pub struct SolvedPlant {
    pub plant: LinearPlant,
    pub control: ControlRiccati,
    pub filter: Option<FilterRiccati>,
    pub b_min: f64,
}

impl SolvedPlant {
    /// Solves the control equation and, for partially observed plants, the filter equation.
    pub fn solve(plant: LinearPlant) -> Result<Self, RiccatiError> {
        let control = solve_control(&plant)?;
        let filter = if plant.is_fully_observed() {
            None
        } else {
            Some(solve_filter(&plant)?)
        };
        let b_min = b_min(&plant, &control, filter.as_ref());
        Ok(Self {
            plant,
            control,
            filter,
            b_min,
        })
    }

    /// `A^T M A`.
    pub fn weight(&self) -> DMatrix<f64> {
        self.control.weight(&self.plant.a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{NoiseFamily, NoiseModel};

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn gauss(v: f64) -> NoiseModel {
        NoiseModel::scalar(NoiseFamily::Gaussian, v).unwrap()
    }

    fn scalar_full(a: f64, b: f64, q: f64, r: f64, v: f64) -> LinearPlant {
        LinearPlant::fully_observed(s(a), s(b), s(q), s(r), gauss(v), gauss(1.0)).unwrap()
    }

    fn scalar_partial(a: f64, c: f64, v: f64, w: f64) -> LinearPlant {
        LinearPlant::partially_observed(s(a), s(1.0), s(c), s(1.0), s(1.0), gauss(v), gauss(w), gauss(1.0)).unwrap()
    }

    const SQRT5: f64 = 2.236_067_977_499_79;

    #[test]
    fn scalar_control_oracle() {
        // S^2 - 4S - 1 = 0
        let sol = solve_control(&scalar_full(2.0, 1.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((sol.s[(0, 0)] - (2.0 + SQRT5)).abs() < 1e-9);
        assert!((sol.m[(0, 0)] - (7.0 + 3.0 * SQRT5) / 4.0).abs() < 1e-9);
        assert!((sol.l[(0, 0)] - (1.0 + SQRT5) / 4.0).abs() < 1e-9);
        assert!(sol.residual < 1e-9);
        assert!(!sol.pseudo_inverse_used);
    }

    #[test]
    fn zero_dynamics_fixed_point_is_q() {
        let (b, q, r) = (0.7, 2.0, 0.5);
        let sol = solve_control(&scalar_full(0.0, b, q, r, 1.0)).unwrap();
        assert!((sol.s[(0, 0)] - q).abs() < 1e-12);
        let m = q * b * b * q / (r + b * q * b);
        assert!((sol.m[(0, 0)] - m).abs() < 1e-12);
    }

    #[test]
    fn zero_control_weight_gives_s_equal_q() {
        let sol = solve_control(&scalar_full(2.0, 1.0, 1.0, 0.0, 1.0)).unwrap();
        assert!((sol.s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sol.m[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((sol.l[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_input_with_zero_r_uses_pinv() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::zeros(2, 2);
        let noise = NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap();
        let p = LinearPlant::fully_observed(a.clone(), b, q.clone(), r, noise.clone(), noise).unwrap();
        let sol = solve_control(&p).unwrap();
        assert!(sol.pseudo_inverse_used);
        let resid = &sol.s - &q - a.transpose() * (&sol.s - &sol.m) * &a;
        assert!(resid.amax() < 1e-9);
    }

    #[test]
    fn scalar_filter_oracle() {
        let f = solve_filter(&scalar_partial(2.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((f.p[(0, 0)] - (2.0 + SQRT5)).abs() < 1e-9);
        assert!((f.k[(0, 0)] - (1.0 + SQRT5) / 4.0).abs() < 1e-9);
        assert!((f.sigma[(0, 0)] - (1.0 + SQRT5) / 4.0).abs() < 1e-9);
        assert!((f.n[(0, 0)] - (7.0 + 3.0 * SQRT5) / 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_dynamics_filter() {
        let f = solve_filter(&scalar_partial(0.0, 1.0, 1.0, 1.0)).unwrap();
        assert!((f.p[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((f.k[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((f.sigma[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn noiseless_observation_limit() {
        let eps = 1e-10;
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.0, 0.8]);
        let sv = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let p = LinearPlant::partially_observed(
            a,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            NoiseModel::gaussian(sv.clone()).unwrap(),
            NoiseModel::gaussian(DMatrix::identity(2, 2) * eps).unwrap(),
            NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap(),
        )
        .unwrap();
        let f = solve_filter(&p).unwrap();
        assert!(f.sigma.amax() < 1e-8);
        assert!((&f.n - &sv).amax() < 1e-8);
    }

    #[test]
    fn filter_rejects_non_gaussian() {
        let p = LinearPlant::partially_observed(
            s(2.0),
            s(1.0),
            s(1.0),
            s(1.0),
            s(1.0),
            NoiseModel::scalar(NoiseFamily::Laplace, 1.0).unwrap(),
            gauss(1.0),
            gauss(1.0),
        )
        .unwrap();
        assert_eq!(solve_filter(&p).unwrap_err(), RiccatiError::NonGaussian);
    }

    #[test]
    fn innovation_covariance_forms_agree() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.4, -0.2, 0.9]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let sv = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let p = LinearPlant::partially_observed(
            a.clone(),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
            c,
            DMatrix::identity(2, 2),
            s(1.0),
            NoiseModel::gaussian(sv.clone()).unwrap(),
            gauss(0.3),
            NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap(),
        )
        .unwrap();
        let f = solve_filter(&p).unwrap();
        let other = &a * &f.sigma * a.transpose() - &f.sigma + &sv;
        assert!(linalg::frobenius(&(&f.n - other)) < 1e-9);
    }

    #[test]
    fn b_min_examples() {
        let full = scalar_full(2.0, 1.0, 1.0, 1.0, 1.0);
        let c = solve_control(&full).unwrap();
        assert!((b_min(&full, &c, None) - (2.0 + SQRT5)).abs() < 1e-9);

        let part = scalar_partial(2.0, 1.0, 1.0, 1.0);
        let cp = solve_control(&part).unwrap();
        let fp = solve_filter(&part).unwrap();
        let expect = (2.0 + SQRT5) + (1.0 + SQRT5) / 4.0 * 4.0 * (7.0 + 3.0 * SQRT5) / 4.0;
        assert!((b_min(&part, &cp, Some(&fp)) - expect).abs() < 1e-9);
        assert!((expect - 15.3262).abs() < 1e-4);

        let quiet = LinearPlant::fully_observed(s(2.0), s(1.0), s(1.0), s(1.0), gauss(0.0), gauss(1.0)).unwrap();
        let cq = solve_control(&quiet).unwrap();
        assert_eq!(b_min(&quiet, &cq, None), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn larger_q_never_decreases_trace_s(
                a11 in -2.0f64..2.0, a12 in -1.0f64..1.0, a22 in -2.0f64..2.0,
                q1 in 0.1f64..3.0, q2 in 0.1f64..3.0, dq1 in 0.0f64..2.0, dq2 in 0.0f64..2.0, r in 0.1f64..2.0,
            ) {
                let a = DMatrix::from_row_slice(2, 2, &[a11, a12, 0.0, a22]);
                let b = DMatrix::identity(2, 2);
                let noise = NoiseModel::gaussian(DMatrix::identity(2, 2)).unwrap();
                let mk = |q: DMatrix<f64>| {
                    let p = LinearPlant::fully_observed(a.clone(), b.clone(), q, DMatrix::identity(2, 2) * r, noise.clone(), noise.clone()).unwrap();
                    solve_control(&p).unwrap()
                };
                let lo = mk(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![q1, q2])));
                let hi = mk(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![q1 + dq1, q2 + dq2])));
                prop_assert!(hi.s.trace() >= lo.s.trace() - 1e-9);
                // residual identities at the returned solution
                for sol in [&lo, &hi] {
                    prop_assert!(sol.residual < 1e-8 * sol.s.norm().max(1.0));
                    let m2 = sol.l.transpose() * &sol.g * &sol.l;
                    prop_assert!((&m2 - &sol.m).amax() < 1e-8 * sol.m.norm().max(1.0));
                    prop_assert!(linalg::is_psd(&sol.s) && linalg::is_psd(&sol.m));
                }
            }
        }
    }
}
