//! Closed-form converse bounds on the rate-cost function, causal Shannon
//! lower bounds, lattice entropy upper bounds and the variable-rate sandwich.
//!
//! Every rate is in nats. Functions named `lower_*` return the raw value of
//! the bound, which may be negative (or `-inf`) for stable or singular `A`;
//! [`BoundPoint`] clamps at zero since a rate is never negative.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::linalg;
use crate::riccati::SolvedPlant;
use crate::sysmodel::{NoiseError, NoiseModel, Regularity};

/// Default truncation of the infimum over powers of `A`.
pub const DEFAULT_I_MAX: usize = 64;
/// Default constant in the Rogers covering reference curve. Not authoritative.
pub const DEFAULT_ROGERS_C: f64 = 2.0;
/// Two consecutive terms of the infimum closer than this count as converged.
pub const INFIMUM_TOL: f64 = 1e-9;
/// Number of log-spaced candidates for the inner distortion search.
pub const DTILDE_GRID: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("infeasible (b ≤ b_min={b_min:.6})")]
    Infeasible { b: f64, b_min: f64 },
    #[error("distortion must be positive, got {0}")]
    NonPositiveDistortion(f64),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("hypothesis not met: {0}")]
    Hypothesis(String),
    #[error("inadmissible projection: {0}")]
    Projection(String),
    #[error("noise regularity constants unknown; no lattice entropy bound")]
    UnknownRegularity,
}

/// Which bound produced a [`BoundPoint`]. The wire names are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundKind {
    #[serde(rename = "thm1")]
    FullyObserved,
    #[serde(rename = "thm3")]
    Projected,
    #[serde(rename = "thm4")]
    LowRankControl,
    #[serde(rename = "thm5")]
    PartiallyObserved,
    #[serde(rename = "thm7")]
    ProjectedPartial,
    #[serde(rename = "thm8")]
    LowRankPartial,
    #[serde(rename = "slb_thm9")]
    CausalSlb,
    #[serde(rename = "slb_thm11")]
    CausalSlbProjected,
    #[serde(rename = "slb_thm12")]
    CausalSlbLowRank,
    #[serde(rename = "upper_thm2")]
    UpperFullyObserved,
    #[serde(rename = "upper_thm6")]
    UpperPartiallyObserved,
    #[serde(rename = "unstable_floor")]
    UnstableFloor,
}

impl BoundKind {
    pub const ALL: [BoundKind; 12] = [
        BoundKind::FullyObserved,
        BoundKind::Projected,
        BoundKind::LowRankControl,
        BoundKind::PartiallyObserved,
        BoundKind::ProjectedPartial,
        BoundKind::LowRankPartial,
        BoundKind::CausalSlb,
        BoundKind::CausalSlbProjected,
        BoundKind::CausalSlbLowRank,
        BoundKind::UpperFullyObserved,
        BoundKind::UpperPartiallyObserved,
        BoundKind::UnstableFloor,
    ];

    /// The wire name used in configs and output files.
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::FullyObserved => "thm1",
            BoundKind::Projected => "thm3",
            BoundKind::LowRankControl => "thm4",
            BoundKind::PartiallyObserved => "thm5",
            BoundKind::ProjectedPartial => "thm7",
            BoundKind::LowRankPartial => "thm8",
            BoundKind::CausalSlb => "slb_thm9",
            BoundKind::CausalSlbProjected => "slb_thm11",
            BoundKind::CausalSlbLowRank => "slb_thm12",
            BoundKind::UpperFullyObserved => "upper_thm2",
            BoundKind::UpperPartiallyObserved => "upper_thm6",
            BoundKind::UnstableFloor => "unstable_floor",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, BoundKind::UpperFullyObserved | BoundKind::UpperPartiallyObserved)
    }
}

impl std::fmt::Display for BoundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One evaluated bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundPoint {
    pub b: f64,
    /// Clamped at zero.
    pub rate_nats: f64,
    pub kind: BoundKind,
    /// False when the value rests on an unconverged infimum.
    pub verified: bool,
}

impl BoundPoint {
    pub fn new(kind: BoundKind, b: f64, raw_nats: f64, verified: bool) -> Self {
        Self {
            b,
            rate_nats: raw_nats.max(0.0),
            kind,
            verified,
        }
    }

    pub fn rate_bits(&self) -> f64 {
        crate::nats_to_bits(self.rate_nats)
    }
}

/// A bound that depends on the truncated infimum over powers of `A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InfimumBound {
    pub rate_nats: f64,
    /// The running minimum `a` over `i = 1..=iterations`.
    pub a: f64,
    pub iterations: usize,
    /// The last two terms agreed to within [`INFIMUM_TOL`].
    pub converged: bool,
}

fn excess(b: f64, b_min: f64) -> Result<f64, BoundError> {
    let d = b - b_min;
    if d > 0.0 && b.is_finite() {
        Ok(d)
    } else if b == f64::INFINITY {
        Ok(f64::INFINITY)
    } else {
        Err(BoundError::Infeasible { b, b_min })
    }
}

/// `tr(Σ_V S)`, the cost floor of the fully observed loop.
pub fn b_min_fully_observed(sp: &SolvedPlant) -> f64 {
    (sp.plant.noise_v.covariance() * &sp.control.s).trace()
}

fn det_root(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 1.0;
    }
    (linalg::log_abs_det(m) / n as f64).exp()
}

fn require_full(sp: &SolvedPlant) -> Result<(), BoundError> {
    if sp.plant.is_fully_observed() {
        Ok(())
    } else {
        Err(BoundError::Hypothesis("bound applies to fully observed plants".into()))
    }
}

fn require_partial(sp: &SolvedPlant) -> Result<&crate::riccati::FilterRiccati, BoundError> {
    if !sp.plant.is_gaussian() {
        return Err(BoundError::Hypothesis("partially observed bounds need Gaussian X1, V and W".into()));
    }
    sp.filter
        .as_ref()
        .ok_or_else(|| BoundError::Hypothesis("bound applies to partially observed plants".into()))
}

/// `log|det A| + (n/2) log(1 + N(V) |det M|^{1/n} / (d/n))` with `d = b - tr(Σ_V S)`.
/// `-inf` when `A` is singular.
pub fn lower_fully_observed(sp: &SolvedPlant, b: f64) -> Result<f64, BoundError> {
    require_full(sp)?;
    let d = excess(b, b_min_fully_observed(sp))?;
    let n = sp.plant.n() as f64;
    let nv = sp.plant.noise_v.entropy_power()?;
    Ok(linalg::log_abs_det(&sp.plant.a) + n / 2.0 * (nv * det_root(&sp.control.m) * n / d).ln_1p())
}

/// `log|det A| + (n/2) log(1 + (det N det M)^{1/n} / (d/n))` with `d = b - b_min`.
pub fn lower_partially_observed(sp: &SolvedPlant, b: f64) -> Result<f64, BoundError> {
    let filter = require_partial(sp)?;
    let d = excess(b, sp.b_min)?;
    let n = sp.plant.n() as f64;
    let eta = det_root(&filter.n) * det_root(&sp.control.m);
    Ok(linalg::log_abs_det(&sp.plant.a) + n / 2.0 * (eta * n / d).ln_1p())
}

/// `sum log|λ|` over the eigenvalues of `A` outside the unit circle.
pub fn unstable_floor(a: &DMatrix<f64>) -> f64 {
    eigen_magnitudes(a).iter().filter(|&&m| m > 1.0).map(|m| m.ln()).sum()
}

fn eigen_magnitudes(a: &DMatrix<f64>) -> Vec<f64> {
    let mut mags: Vec<f64> = a.clone().complex_eigenvalues().iter().map(|z| z.norm()).collect();
    mags.sort_by(|x, y| y.total_cmp(x));
    mags
}

/// A change of basis `J` that makes `J^{-1} A J` block lower triangular with
/// the `ell` largest-magnitude eigenvalues in the leading block, plus a
/// diagonal `Λ` with `J^T M J ⪰ Λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    j: DMatrix<f64>,
    j_inv: DMatrix<f64>,
    ell: usize,
    lambda: Vec<f64>,
    a_prime: f64,
    mu_prime: f64,
}

impl ProjectionSpec {
    /// Builds `J` from the dominant `ell`-dimensional invariant subspace of
    /// `A^T`, so `J` is orthogonal. `weight` plays the role of `M` and the
    /// default `Λ = λ_min(J^T M J) I`.
    pub fn dominant(a: &DMatrix<f64>, weight: &DMatrix<f64>, ell: usize) -> Result<Self, BoundError> {
        let n = a.nrows();
        if !linalg::is_square(a) || weight.shape() != (n, n) {
            return Err(BoundError::Projection("A and the weight must be n x n".into()));
        }
        if ell > n {
            return Err(BoundError::Projection(format!("ell = {ell} exceeds n = {n}")));
        }
        let j = if ell == 0 || ell == n {
            DMatrix::identity(n, n)
        } else {
            let mags = eigen_magnitudes(a);
            if mags[ell - 1] <= mags[ell] * (1.0 + 1e-9) + 1e-300 {
                return Err(BoundError::Projection(format!(
                    "no eigenvalue gap between positions {ell} and {} (|λ| = {} vs {})",
                    ell + 1,
                    mags[ell - 1],
                    mags[ell]
                )));
            }
            let q = dominant_subspace(&a.transpose(), ell)?;
            let qc = linalg::orthogonal_complement(&q);
            let mut j = DMatrix::zeros(n, n);
            j.columns_mut(0, ell).copy_from(&q);
            j.columns_mut(ell, n - ell).copy_from(&qc);
            j
        };
        let jtmj = j.transpose() * weight * &j;
        let floor = linalg::min_eigenvalue(&jtmj).max(0.0);
        Self::with_basis(a, weight, j, ell, Some(vec![floor; n]))
    }

    /// `ell` = number of eigenvalues of `A` with magnitude above one.
    pub fn unstable(a: &DMatrix<f64>, weight: &DMatrix<f64>) -> Result<Self, BoundError> {
        let ell = eigen_magnitudes(a).iter().filter(|&&m| m > 1.0).count();
        Self::dominant(a, weight, ell)
    }

    /// Validates a caller-supplied `J` and optional `Λ` diagonal (length n).
    pub fn with_basis(
        a: &DMatrix<f64>,
        weight: &DMatrix<f64>,
        j: DMatrix<f64>,
        ell: usize,
        lambda: Option<Vec<f64>>,
    ) -> Result<Self, BoundError> {
        let n = a.nrows();
        if j.shape() != (n, n) || weight.shape() != (n, n) || ell > n {
            return Err(BoundError::Projection("J, A and the weight must be n x n with ell <= n".into()));
        }
        let j_inv = j
            .clone()
            .try_inverse()
            .filter(|inv| inv.iter().all(|x| x.is_finite()))
            .ok_or_else(|| BoundError::Projection("J is singular".into()))?;
        let ap = &j_inv * a * &j;
        let scale = ap.amax().max(1.0);
        if ell > 0 && ell < n {
            let upper_right = ap.view((0, ell), (ell, n - ell));
            if upper_right.amax() > 1e-8 * scale {
                return Err(BoundError::Projection(format!(
                    "J^-1 A J is not block lower triangular (upper-right block max {:.3e})",
                    upper_right.amax()
                )));
            }
            let lead = eigen_magnitudes(&ap.view((0, 0), (ell, ell)).into_owned());
            let rest = eigen_magnitudes(&ap.view((ell, ell), (n - ell, n - ell)).into_owned());
            let lead_min = lead.last().copied().unwrap_or(0.0);
            if lead_min < rest[0] * (1.0 - 1e-9) {
                return Err(BoundError::Projection(format!(
                    "leading block must hold the largest eigenvalues ({lead_min} < {})",
                    rest[0]
                )));
            }
        }
        let jtmj = linalg::symmetrize(&(j.transpose() * weight * &j));
        let lambda = match lambda {
            Some(l) => l,
            None => vec![linalg::min_eigenvalue(&jtmj).max(0.0); n],
        };
        if lambda.len() != n || lambda.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(BoundError::Projection("Λ must list n nonnegative diagonal entries".into()));
        }
        let gap = &jtmj - DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&lambda));
        if !linalg::is_psd(&gap) {
            return Err(BoundError::Projection(format!(
                "J^T M J - Λ is not PSD (min eigenvalue {:.3e})",
                linalg::min_eigenvalue(&gap)
            )));
        }
        let (a_prime, mu_prime) = if ell == 0 {
            (1.0, 1.0)
        } else {
            let block = ap.view((0, 0), (ell, ell)).into_owned();
            let mu = (lambda[..ell].iter().map(|x| x.ln()).sum::<f64>() / ell as f64).exp();
            (det_root(&block), mu)
        };
        Ok(Self {
            j,
            j_inv,
            ell,
            lambda,
            a_prime,
            mu_prime,
        })
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `|det(Π^T J^{-1} A J Π)|^{1/ell}`.
    pub fn a_prime(&self) -> f64 {
        self.a_prime
    }

    /// Geometric mean of the leading `ell` entries of `Λ`.
    pub fn mu_prime(&self) -> f64 {
        self.mu_prime
    }

    /// `Π^T J^{-1}`, the first `ell` rows of `J^{-1}`.
    pub fn projector(&self) -> DMatrix<f64> {
        self.j_inv.rows(0, self.ell).into_owned()
    }
}

/// Orthonormal basis of the dominant `ell`-dimensional invariant subspace of
/// `t`, by orthogonal (subspace) iteration.
fn dominant_subspace(t: &DMatrix<f64>, ell: usize) -> Result<DMatrix<f64>, BoundError> {
    let n = t.nrows();
    // Fixed, generic start so the result is reproducible.
    let start = DMatrix::from_fn(n, ell, |i, j| ((7 * i + 3 * j + 1) as f64).sin() + if i == j { 1.0 } else { 0.0 });
    let mut q = start.qr().q();
    let tnorm = t.norm().max(1.0);
    for _ in 0..200_000 {
        let z = t * &q;
        q = z.qr().q();
        let tq = t * &q;
        let resid = (&tq - &q * (q.transpose() * &tq)).norm();
        if resid <= 1e-12 * tnorm {
            return Ok(q);
        }
    }
    Err(BoundError::Projection("subspace iteration did not converge".into()))
}

fn projected_rate(ell: usize, a_prime: f64, gain: f64, d: f64) -> f64 {
    if ell == 0 {
        return 0.0;
    }
    let l = ell as f64;
    l * a_prime.ln() + l / 2.0 * (gain * l / d).ln_1p()
}

/// `ell log a' + (ell/2) log(1 + μ' N(Π^T J^{-1} V) / (d/ell))`.
pub fn lower_projected(sp: &SolvedPlant, proj: &ProjectionSpec, b: f64) -> Result<f64, BoundError> {
    require_full(sp)?;
    check_projection(sp, proj)?;
    let d = excess(b, b_min_fully_observed(sp))?;
    if proj.ell == 0 {
        return Ok(0.0);
    }
    let np = sp.plant.noise_v.linear_entropy_power(&proj.projector())?;
    Ok(projected_rate(proj.ell, proj.a_prime, proj.mu_prime * np, d))
}

/// `ell log a' + (ell/2) log(1 + η' μ' / (d/ell))` with
/// `η' = det(Π^T J^{-1} N J^{-T} Π)^{1/ell}`.
pub fn lower_projected_partial(sp: &SolvedPlant, proj: &ProjectionSpec, b: f64) -> Result<f64, BoundError> {
    let filter = require_partial(sp)?;
    check_projection(sp, proj)?;
    let d = excess(b, sp.b_min)?;
    if proj.ell == 0 {
        return Ok(0.0);
    }
    let p = proj.projector();
    let eta = det_root(&(&p * &filter.n * p.transpose()));
    Ok(projected_rate(proj.ell, proj.a_prime, proj.mu_prime * eta, d))
}

fn check_projection(sp: &SolvedPlant, proj: &ProjectionSpec) -> Result<(), BoundError> {
    if proj.j.nrows() != sp.plant.n() {
        return Err(BoundError::Projection("projection dimension does not match the plant".into()));
    }
    Ok(())
}

/// `inf_{1 <= i <= i_max} (det(L A^i K Σ K^T A^iT L^T) / (det Σ det LL^T det K^T K))^{1/(2im)}`
/// evaluated in the log domain with normalised powers of `A`.
pub fn low_rank_infimum(
    a: &DMatrix<f64>,
    l: &DMatrix<f64>,
    k: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    i_max: usize,
) -> Result<(f64, usize, bool), BoundError> {
    let n = a.nrows();
    let m = l.nrows();
    let kd = k.ncols();
    if l.ncols() != n || k.nrows() != n || sigma.shape() != (kd, kd) || !linalg::is_square(a) {
        return Err(BoundError::Hypothesis("shape mismatch in L A^i K".into()));
    }
    if i_max == 0 {
        return Err(BoundError::Hypothesis("i_max must be at least 1".into()));
    }
    let llt = l * l.transpose();
    let ktk = k.transpose() * k;
    let denom = linalg::log_abs_det(sigma) + linalg::log_abs_det(&llt) + linalg::log_abs_det(&ktk);
    if !denom.is_finite() {
        return Err(BoundError::Hypothesis("Σ, L L^T and K^T K must be nonsingular".into()));
    }
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut log_scale = 0.0;
    let mut best = f64::INFINITY;
    let mut prev = f64::NAN;
    let mut converged = false;
    let mut used = 0;
    for i in 1..=i_max {
        power = &power * a;
        let s = power.amax();
        if s == 0.0 {
            return Ok((0.0, i, true));
        }
        power /= s;
        log_scale += s.ln();
        let g = l * &power * k;
        let num = linalg::log_abs_det(&(&g * sigma * g.transpose())) + 2.0 * m as f64 * log_scale;
        let term = (num - denom) / (2.0 * i as f64 * m as f64);
        used = i;
        best = best.min(term);
        if i > 1 && (term.exp() - prev.exp()).abs() <= INFIMUM_TOL * prev.exp().max(1.0) {
            converged = true;
            break;
        }
        prev = term;
    }
    Ok((best.exp(), used, converged))
}

/// Low-rank-control bound: `(m/2) log(a^2 + |det A|^{2/m} μ N(V)^{n/m} m/d)`
/// with `μ = (det(R + B^T S B) det LL^T)^{1/m}`. Equals the fully observed
/// bound when `m = n`.
pub fn lower_low_rank_control(sp: &SolvedPlant, b: f64, i_max: usize) -> Result<InfimumBound, BoundError> {
    require_full(sp)?;
    let d = excess(b, b_min_fully_observed(sp))?;
    let plant = &sp.plant;
    let (n, m) = (plant.n(), plant.m());
    if linalg::numerical_rank(&sp.control.l) < m {
        return Err(BoundError::Hypothesis("rank L must equal m".into()));
    }
    let sigma = plant.noise_v.covariance();
    if linalg::numerical_rank(sigma) < n {
        return Err(BoundError::Hypothesis("Σ_V must be nonsingular".into()));
    }
    let (a, iterations, converged) =
        low_rank_infimum(&plant.a, &sp.control.l, &DMatrix::identity(n, n), sigma, i_max)?;
    let mu = det_root_product(&sp.control.g, &(&sp.control.l * sp.control.l.transpose()), m);
    let nv = plant.noise_v.entropy_power()?;
    let gain = mu * nv.powf(n as f64 / m as f64);
    Ok(InfimumBound {
        rate_nats: low_rank_rate(a, linalg::log_abs_det(&plant.a), m, gain, d),
        a,
        iterations,
        converged,
    })
}

/// Low-rank partially observed bound: `(m/2) log(a^2 + |det A|^{2/m} η μ m/d)`
/// with `η = (det(C P C^T + Σ_W) det K^T K)^{1/m}`. Needs `m <= k <= n`.
pub fn lower_low_rank_partial(sp: &SolvedPlant, b: f64, i_max: usize) -> Result<InfimumBound, BoundError> {
    let filter = require_partial(sp)?;
    let d = excess(b, sp.b_min)?;
    let plant = &sp.plant;
    let (n, m, k) = (plant.n(), plant.m(), plant.k());
    if !(m <= k && k <= n) {
        return Err(BoundError::Hypothesis(format!("need m <= k <= n, got m={m}, k={k}, n={n}")));
    }
    if linalg::numerical_rank(&sp.control.l) < m {
        return Err(BoundError::Hypothesis("rank L must equal m".into()));
    }
    let out = &filter.output_innovation;
    let (a, iterations, converged) = low_rank_infimum(&plant.a, &sp.control.l, &filter.k, out, i_max)?;
    let mu = det_root_product(&sp.control.g, &(&sp.control.l * sp.control.l.transpose()), m);
    let eta = det_root_product(out, &(filter.k.transpose() * &filter.k), m);
    Ok(InfimumBound {
        rate_nats: low_rank_rate(a, linalg::log_abs_det(&plant.a), m, eta * mu, d),
        a,
        iterations,
        converged,
    })
}

/// `(det x det y)^{1/m}`.
fn det_root_product(x: &DMatrix<f64>, y: &DMatrix<f64>, m: usize) -> f64 {
    ((linalg::log_abs_det(x) + linalg::log_abs_det(y)) / m as f64).exp()
}

fn low_rank_rate(a: f64, log_det_a: f64, m: usize, gain: f64, d: f64) -> f64 {
    let mf = m as f64;
    let lead = (2.0 * log_det_a / mf).exp();
    mf / 2.0 * (a * a + lead * gain * mf / d).ln()
}

/// Causal Shannon lower bound `(n/2) log(a^2 + w N(V) / (d/n))`.
pub fn causal_slb(a: f64, w: f64, entropy_power_v: f64, n: usize, d: f64) -> Result<f64, BoundError> {
    if !(d > 0.0) {
        return Err(BoundError::NonPositiveDistortion(d));
    }
    if w < 0.0 || a < 0.0 {
        return Err(BoundError::Hypothesis("a and w must be nonnegative".into()));
    }
    let nf = n as f64;
    Ok(nf / 2.0 * (a * a + w * entropy_power_v * nf / d).ln())
}

/// Projected causal SLB `(ell/2) log(a'^2 + w' N(Π^T J^{-1} V) / (d/ell))`.
///
/// `proj` must be built with the distortion weight in place of `M`; its `Λ`
/// then defines the diagonal weight factor `V_w = Λ^{1/2}`, which commutes
/// with `ΠΠ^T` and satisfies `V_w^T V_w ⪯ J^T W J`, so `w' = μ'`.
pub fn causal_slb_projected(proj: &ProjectionSpec, noise: &NoiseModel, d: f64) -> Result<f64, BoundError> {
    if !(d > 0.0) {
        return Err(BoundError::NonPositiveDistortion(d));
    }
    if noise.dim() != proj.j.nrows() {
        return Err(BoundError::Hypothesis("noise dimension does not match the projection".into()));
    }
    if proj.ell == 0 {
        return Ok(0.0);
    }
    let l = proj.ell as f64;
    let np = noise.linear_entropy_power(&proj.projector())?;
    Ok(l / 2.0 * (proj.a_prime * proj.a_prime + proj.mu_prime * np * l / d).ln())
}

/// Low-rank causal SLB for weights tending to `L^T L` (L is m x n) and noise
/// `K V'` (K is n x k, V' k-dimensional):
/// `(m/2) log(a^2 + w N(V')^{k/m} / (d/m))`, `w = (det LL^T det K^T K)^{1/m}`.
pub fn causal_slb_low_rank(
    a_mat: &DMatrix<f64>,
    l: &DMatrix<f64>,
    k: &DMatrix<f64>,
    noise: &NoiseModel,
    d: f64,
    i_max: usize,
) -> Result<InfimumBound, BoundError> {
    if !(d > 0.0) {
        return Err(BoundError::NonPositiveDistortion(d));
    }
    let (m, kd) = (l.nrows(), k.ncols());
    if noise.dim() != kd || kd < m {
        return Err(BoundError::Hypothesis(format!("need k >= m and V' of dimension k = {kd}")));
    }
    let (a, iterations, converged) = low_rank_infimum(a_mat, l, k, noise.covariance(), i_max)?;
    let w = det_root_product(&(l * l.transpose()), &(k.transpose() * k), m);
    let nv = noise.entropy_power()?;
    let mf = m as f64;
    Ok(InfimumBound {
        rate_nats: mf / 2.0 * (a * a + w * nv.powf(kd as f64 / mf) * mf / d).ln(),
        a,
        iterations,
        converged,
    })
}

/// `α_n = (n/2) log(2e/n) + log Γ(n/2 + 1)`.
pub fn alpha_n(n: usize) -> f64 {
    let nf = n as f64;
    nf / 2.0 * (2.0 * std::f64::consts::E / nf).ln() + ln_gamma(nf / 2.0 + 1.0)
}

/// Covering efficiency of `A_n*`:
/// `π^{1/2} (n+1)^{1/(2n)} / Γ(n/2+1)^{1/n} · sqrt(n(n+2) / (12(n+1)))`.
pub fn rho_an_star(n: usize) -> f64 {
    let nf = n as f64;
    let log = 0.5 * std::f64::consts::PI.ln() + (nf + 1.0).ln() / (2.0 * nf) - ln_gamma(nf / 2.0 + 1.0) / nf
        + 0.5 * (nf * (nf + 2.0) / (12.0 * (nf + 1.0))).ln();
    log.exp()
}

/// Covering efficiency of the lattice the quantizer uses in dimension `n`.
pub fn scheme_rho(n: usize) -> f64 {
    if n == 1 {
        1.0
    } else {
        rho_an_star(n)
    }
}

/// Reference curve `log2 sqrt(2πe) (ln n + ln ln n + c)` for the best known
/// `n log ρ` in high dimension, `n >= 3`. The constant `c` is not pinned
/// down by the underlying covering result.
pub fn rogers_reference(n: usize, c: f64) -> Option<f64> {
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let k = (2.0 * std::f64::consts::PI * std::f64::consts::E).sqrt().log2();
    Some(k * (nf.ln() + nf.ln().ln() + c))
}

/// Result of the inner minimisation over `d̃ <= d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatticeUpper {
    pub entropy_nats: f64,
    pub d_tilde: f64,
}

/// Minimises `f` over `d̃ ∈ [1e-6 min(d, scale), d]`: a log-spaced grid
/// followed by a golden-section refinement around the best grid point.
/// `scale` is the problem's natural distortion size; anchoring the lower end
/// to it keeps the minimiser in range when `d` is huge, so the result stays
/// nonincreasing in `d`.
fn minimise_over_dtilde(d: f64, scale: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let lo = (1e-6 * d.min(scale)).ln();
    let hi = d.ln();
    let step = (hi - lo) / (DTILDE_GRID - 1) as f64;
    let grid: Vec<f64> = (0..DTILDE_GRID).map(|i| if i + 1 == DTILDE_GRID { hi } else { lo + step * i as f64 }).collect();
    let (mut best_x, mut best_v) = (hi, f(d));
    let mut best_i = DTILDE_GRID - 1;
    for (i, &x) in grid.iter().enumerate() {
        let v = f(x.exp());
        if v < best_v {
            best_v = v;
            best_x = x;
            best_i = i;
        }
    }
    let mut a = grid[best_i.saturating_sub(1)];
    let mut b = grid[(best_i + 1).min(DTILDE_GRID - 1)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut e = a + phi * (b - a);
    let (mut fc, mut fe) = (f(c.exp()), f(e.exp()));
    for _ in 0..80 {
        if fc < fe {
            b = e;
            e = c;
            fe = fc;
            c = b - phi * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + phi * (b - a);
            fe = f(e.exp());
        }
    }
    for (x, v) in [(c, fc), (e, fe)] {
        if v < best_v {
            best_v = v;
            best_x = x;
        }
    }
    (best_x.exp().min(d), best_v)
}

/// Entropy bound for the best lattice quantizer with squared covering radius
/// `d` applied to a `(c0, c1)`-regular vector `X` with entropy power `N(X)`
/// and total variance `Var X`:
/// `min_{d̃ <= d} (n/2) log(N(X)/(d̃/n)) + α_n + n log ρ + 2 d̃^{1/2} (c1 sqrt(Var) + c0 + c1 d̃^{1/2})`.
pub fn lattice_entropy_upper(
    regularity: Regularity,
    n: usize,
    rho: f64,
    entropy_power_x: f64,
    variance: f64,
    d: f64,
) -> Result<LatticeUpper, BoundError> {
    let Regularity::Known { c0, c1 } = regularity else {
        return Err(BoundError::UnknownRegularity);
    };
    if !(d > 0.0) {
        return Err(BoundError::NonPositiveDistortion(d));
    }
    let nf = n as f64;
    let constant = alpha_n(n) + nf * rho.ln();
    let objective = |dt: f64| {
        nf / 2.0 * (entropy_power_x * nf / dt).ln() + 2.0 * dt.sqrt() * (c1 * variance.sqrt() + c0 + c1 * dt.sqrt())
    };
    let (d_tilde, v) = minimise_over_dtilde(d, variance.max(entropy_power_x * nf), objective);
    Ok(LatticeUpper {
        entropy_nats: v + constant,
        d_tilde,
    })
}

/// Concrete entropy-cost upper bound achieved by the DPCM lattice scheme.
///
/// With `d = b - b_min`, `W = A^T M A` and the innovation driven by `ξ`
/// (`V` when fully observed, a Gaussian of covariance `N` otherwise):
/// `min_{d̃ <= d} [lead(d̃) + corr(d̃)] + α_n + n log ρ`, where `lead(d̃)` is
/// the matching converse at cost `b_min + d̃` and `corr` is the regularity
/// term of the lattice bound for the weighted innovation. Because
/// `lead(d̃) >= lead(d)` for `d̃ <= d`, the result never falls below the
/// converse, and the gap tends to `α_n + n log ρ` as `d -> 0`.
pub fn entropy_cost_upper(sp: &SolvedPlant, b: f64) -> Result<LatticeUpper, BoundError> {
    let plant = &sp.plant;
    let n = plant.n();
    let nf = n as f64;
    let w = sp.weight();
    let w_min = linalg::min_eigenvalue(&w);
    if !(w_min > 0.0) {
        return Err(BoundError::Hypothesis("A^T M A must be positive definite".into()));
    }
    let log_det_a = linalg::log_abs_det(&plant.a);
    let det_m = det_root(&sp.control.m);
    let (b_min, regularity, sigma_xi, gain) = match &sp.filter {
        None => {
            let nv = plant.noise_v.entropy_power()?;
            (b_min_fully_observed(sp), plant.noise_v.regularity(), plant.noise_v.covariance().clone(), nv * det_m)
        }
        Some(_) => {
            let filter = require_partial(sp)?;
            let nmin = linalg::min_eigenvalue(&filter.n);
            if !(nmin > 0.0) {
                return Err(BoundError::Hypothesis("innovation covariance N must be positive definite".into()));
            }
            (
                sp.b_min,
                Regularity::Known { c0: 0.0, c1: 3.0 / nmin },
                filter.n.clone(),
                det_root(&filter.n) * det_m,
            )
        }
    };
    let Regularity::Known { c0, c1 } = regularity else {
        return Err(BoundError::UnknownRegularity);
    };
    let d = excess(b, b_min)?;
    if !d.is_finite() {
        return Ok(LatticeUpper {
            entropy_nats: f64::INFINITY,
            d_tilde: d,
        });
    }
    let w_inv_sqrt = linalg::sym_inv_sqrt(&w).ok_or_else(|| BoundError::Hypothesis("A^T M A singular".into()))?;
    let a_w = linalg::sym_eigenvalues(&(&w_inv_sqrt * plant.a.transpose() * &w * &plant.a * &w_inv_sqrt))
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(0.0);
    let tr_xi = (&sigma_xi * &w).trace();
    let objective = |dt: f64| {
        let lead = log_det_a + nf / 2.0 * (gain * nf / dt).ln_1p();
        // The previous reconstruction error shifts the innovation by at most
        // sqrt(a_W d̃ / w_min) in Euclidean norm; rescale to W^{1/2} coordinates.
        let shift = (a_w * dt / w_min).sqrt();
        let c0p = (c0 + c1 * shift) / w_min.sqrt();
        let c1p = c1 / w_min;
        let var = a_w * dt + tr_xi;
        lead + 2.0 * dt.sqrt() * (c1p * var.sqrt() + c0p + c1p * dt.sqrt())
    };
    let (d_tilde, v) = minimise_over_dtilde(d, b_min, objective);
    Ok(LatticeUpper {
        entropy_nats: v + alpha_n(n) + nf * scheme_rho(n).ln(),
        d_tilde,
    })
}

/// `ψ(x) = x + log2(x + 1) + log2 e`, in bits.
pub fn psi(x: f64) -> f64 {
    x + (x + 1.0).log2() + std::f64::consts::LOG2_E
}

/// Inverse of [`psi`] by bisection to `1e-10`; zero for inputs below `ψ(0)`.
pub fn psi_inv(y: f64) -> f64 {
    if !(y > psi(0.0)) {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = y.max(1.0);
    while psi(hi) < y {
        hi *= 2.0;
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if psi(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Operational range of the best variable-rate code, in bits:
/// `(ψ^{-1}(R), H)` for a rate lower bound `R` and an entropy upper bound `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarRateSandwich {
    pub lower_bits: f64,
    pub upper_bits: f64,
}

pub fn varrate_sandwich(rate_lower_bits: f64, entropy_upper_bits: f64) -> VarRateSandwich {
    VarRateSandwich {
        lower_bits: psi_inv(rate_lower_bits.max(0.0)),
        upper_bits: entropy_upper_bits,
    }
}
