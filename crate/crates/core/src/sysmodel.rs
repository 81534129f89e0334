//! Problem instances: linear plants, additive noise models and structural
//! validation of an instance before any solver touches it.

use std::f64::consts::{E, PI};
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("covariance must be a square symmetric PSD matrix: {0}")]
    BadCovariance(String),
    #[error("{family} noise needs a diagonal covariance in the supplied basis: {detail}")]
    NotDiagonal { family: NoiseFamily, detail: String },
    #[error("entropy power zero / not supported: covariance is singular")]
    Singular,
    #[error("no closed-form entropy power for this linear image of {0} noise")]
    UnsupportedProjection(NoiseFamily),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("fully observed plant requires C = I_n (got a {0}x{1} matrix that is not the identity)")]
    NotIdentityObservation(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
    Uniform,
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Laplace => "laplace",
            NoiseFamily::Uniform => "uniform",
        };
        f.write_str(s)
    }
}

/// Constants `(c0, c1)` with `|grad f(x)| <= (c1 |x| + c0) f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Regularity {
    Known { c0: f64, c1: f64 },
    Unknown,
}

/// Zero-mean additive noise, independent across coordinates of an
/// orthonormal basis `U`: `X = U Z` with `Z_j` i.i.d.-family, variance `λ_j`.
///
/// Gaussian models accept any PSD covariance (the basis comes from its
/// eigendecomposition). Laplace and uniform models need a covariance that is
/// diagonal in the caller-supplied basis, which keeps the entropy exact.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    family: NoiseFamily,
    covariance: DMatrix<f64>,
    basis: DMatrix<f64>,
    variances: Vec<f64>,
    basis_is_identity: bool,
}

impl NoiseModel {
    pub fn gaussian(covariance: DMatrix<f64>) -> Result<Self, NoiseError> {
        Self::new(NoiseFamily::Gaussian, covariance, None)
    }

    pub fn laplace(covariance: DMatrix<f64>) -> Result<Self, NoiseError> {
        Self::new(NoiseFamily::Laplace, covariance, None)
    }

    pub fn uniform(covariance: DMatrix<f64>) -> Result<Self, NoiseError> {
        Self::new(NoiseFamily::Uniform, covariance, None)
    }

    /// Scalar model with the given variance.
    pub fn scalar(family: NoiseFamily, variance: f64) -> Result<Self, NoiseError> {
        Self::new(family, DMatrix::from_element(1, 1, variance), None)
    }

    /// Builds a model from a covariance and an optional orthonormal basis.
    /// For non-Gaussian families `basis^T Σ basis` must be diagonal; without a
    /// basis, `Σ` itself must be diagonal.
    pub fn new(family: NoiseFamily, covariance: DMatrix<f64>, basis: Option<DMatrix<f64>>) -> Result<Self, NoiseError> {
        if !linalg::is_square(&covariance) || covariance.nrows() == 0 {
            return Err(NoiseError::BadCovariance(format!(
                "shape {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if !linalg::is_symmetric(&covariance) {
            return Err(NoiseError::BadCovariance("not symmetric".into()));
        }
        if !linalg::is_psd(&covariance) {
            return Err(NoiseError::BadCovariance("not positive semidefinite".into()));
        }
        let n = covariance.nrows();
        let covariance = linalg::symmetrize(&covariance);
        let (basis, variances) = match (family, basis) {
            (_, Some(u)) => {
                if u.shape() != (n, n) {
                    return Err(NoiseError::BadCovariance(format!("basis must be {n}x{n}")));
                }
                if (u.transpose() * &u - DMatrix::<f64>::identity(n, n)).amax() > 1e-9 {
                    return Err(NoiseError::BadCovariance("basis is not orthonormal".into()));
                }
                let rotated = u.transpose() * &covariance * &u;
                check_diagonal(family, &rotated)?;
                let vars = (0..n).map(|i| rotated[(i, i)].max(0.0)).collect();
                (u, vars)
            }
            (NoiseFamily::Gaussian, None) => {
                if is_diagonal(&covariance) {
                    (DMatrix::identity(n, n), (0..n).map(|i| covariance[(i, i)]).collect())
                } else {
                    let eig = SymmetricEigen::new(covariance.clone());
                    let vars = eig.eigenvalues.iter().map(|&e| e.max(0.0)).collect();
                    (eig.eigenvectors, vars)
                }
            }
            (_, None) => {
                check_diagonal(family, &covariance)?;
                (DMatrix::identity(n, n), (0..n).map(|i| covariance[(i, i)]).collect())
            }
        };
        let basis_is_identity = (&basis - DMatrix::<f64>::identity(n, n)).amax() == 0.0;
        Ok(Self {
            family,
            covariance,
            basis,
            variances,
            basis_is_identity,
        })
    }

    pub fn family(&self) -> NoiseFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Per-coordinate variances in the model's basis.
    pub fn coordinate_variances(&self) -> &[f64] {
        &self.variances
    }

    /// `Var{X} = tr Σ`.
    pub fn variance(&self) -> f64 {
        self.covariance.trace()
    }

    pub fn is_gaussian(&self) -> bool {
        self.family == NoiseFamily::Gaussian
    }

    fn coordinate_entropy(&self, var: f64) -> f64 {
        match self.family {
            NoiseFamily::Gaussian => 0.5 * (2.0 * PI * E * var).ln(),
            // scale b = sqrt(var / 2), h = 1 + ln(2b)
            NoiseFamily::Laplace => 1.0 + (2.0 * (var / 2.0).sqrt()).ln(),
            // width sqrt(12 var), h = ln(width)
            NoiseFamily::Uniform => (12.0 * var).sqrt().ln(),
        }
    }

    fn ensure_nonsingular(&self) -> Result<(), NoiseError> {
        let scale = self.variances.iter().fold(0.0_f64, |a, &v| a.max(v));
        if scale <= 0.0 || self.variances.iter().any(|&v| v <= 1e-14 * scale) {
            return Err(NoiseError::Singular);
        }
        Ok(())
    }

    /// Differential entropy in nats.
    pub fn differential_entropy(&self) -> Result<f64, NoiseError> {
        self.ensure_nonsingular()?;
        Ok(self.variances.iter().map(|&v| self.coordinate_entropy(v)).sum())
    }

    /// `N(X) = exp(2 h(X) / n) / (2 π e)`.
    pub fn entropy_power(&self) -> Result<f64, NoiseError> {
        let h = self.differential_entropy()?;
        Ok(entropy_power_from_entropy(h, self.dim()))
    }

    /// Entropy power of the linear image `T X` for an `l x n` matrix `T`.
    ///
    /// Gaussian noise is closed under linear maps. For the other families
    /// the image must only mix exactly `l` independent coordinates through
    /// an invertible block; anything else has no closed form and is rejected.
    pub fn linear_entropy_power(&self, t: &DMatrix<f64>) -> Result<f64, NoiseError> {
        let l = t.nrows();
        if t.ncols() != self.dim() || l == 0 {
            return Err(NoiseError::BadCovariance(format!(
                "projection must be l x {} with l >= 1, got {}x{}",
                self.dim(),
                t.nrows(),
                t.ncols()
            )));
        }
        if self.is_gaussian() {
            let cov = t * &self.covariance * t.transpose();
            let logdet = linalg::log_abs_det(&cov);
            if !logdet.is_finite() || linalg::numerical_rank(&cov) < l {
                return Err(NoiseError::Singular);
            }
            return Ok((logdet / l as f64).exp());
        }
        self.ensure_nonsingular()?;
        let tu = t * &self.basis;
        let cmax = (0..tu.ncols()).map(|j| tu.column(j).norm()).fold(0.0_f64, f64::max);
        let used: Vec<usize> = (0..tu.ncols()).filter(|&j| tu.column(j).norm() > 1e-12 * cmax).collect();
        if used.len() != l {
            return Err(NoiseError::UnsupportedProjection(self.family));
        }
        let block = DMatrix::from_fn(l, l, |i, j| tu[(i, used[j])]);
        let logdet = linalg::log_abs_det(&block);
        if !logdet.is_finite() {
            return Err(NoiseError::Singular);
        }
        let h: f64 = used.iter().map(|&j| self.coordinate_entropy(self.variances[j])).sum::<f64>() + logdet;
        Ok(entropy_power_from_entropy(h, l))
    }

    /// Regularity constants of the density, `Unknown` where no finite pair
    /// applies (uniform: not differentiable at the support boundary).
    ///
    /// Laplace uses the a.e. gradient bound `|∂ log f / ∂z_j| = 1/b_j`; the
    /// density has a kink at the origin where the bound holds one-sidedly.
    pub fn regularity(&self) -> Regularity {
        match self.family {
            NoiseFamily::Gaussian => {
                let smin = self.variances.iter().copied().fold(f64::INFINITY, f64::min);
                if smin > 0.0 {
                    Regularity::Known { c0: 0.0, c1: 3.0 / smin }
                } else {
                    Regularity::Unknown
                }
            }
            NoiseFamily::Laplace => {
                if self.variances.iter().any(|&v| v <= 0.0) {
                    return Regularity::Unknown;
                }
                let c0 = self.variances.iter().map(|&v| 2.0 / v).sum::<f64>().sqrt();
                Regularity::Known { c0, c1: 0.0 }
            }
            NoiseFamily::Uniform => Regularity::Unknown,
        }
    }

    /// Draws one sample into `out`; `scratch` must have length `dim()`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64], scratch: &mut [f64]) {
        let target: &mut [f64] = if self.basis_is_identity { out } else { scratch };
        for (z, &var) in target.iter_mut().zip(&self.variances) {
            *z = draw(self.family, var, rng);
        }
        if !self.basis_is_identity {
            linalg::gemv_into(out, &self.basis, scratch);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut scratch = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out, &mut scratch);
        out
    }
}

fn draw<R: Rng + ?Sized>(family: NoiseFamily, var: f64, rng: &mut R) -> f64 {
    if var == 0.0 {
        return 0.0;
    }
    match family {
        NoiseFamily::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            z * var.sqrt()
        }
        NoiseFamily::Laplace => {
            let e: f64 = Exp1.sample(rng);
            let scale = (var / 2.0).sqrt();
            if rng.random::<bool>() {
                e * scale
            } else {
                -e * scale
            }
        }
        NoiseFamily::Uniform => {
            let half = (3.0 * var).sqrt();
            rng.random_range(-half..half)
        }
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)].abs() <= 1e-12 * scale))
}

fn check_diagonal(family: NoiseFamily, m: &DMatrix<f64>) -> Result<(), NoiseError> {
    if is_diagonal(m) {
        Ok(())
    } else {
        Err(NoiseError::NotDiagonal {
            family,
            detail: "off-diagonal covariance entries; supply an orthonormal basis that diagonalizes it".into(),
        })
    }
}

pub fn entropy_power_from_entropy(h: f64, n: usize) -> f64 {
    (2.0 * h / n as f64).exp() / (2.0 * PI * E)
}

/// Free-function form of [`NoiseModel::entropy_power`].
pub fn entropy_power(noise: &NoiseModel) -> Result<f64, NoiseError> {
    noise.entropy_power()
}

/// Free-function form of [`NoiseModel::regularity`].
pub fn regularity_constants(noise: &NoiseModel) -> Regularity {
    noise.regularity()
}

/// `x_{i+1} = A x_i + B u_i + v_i`, `y_i = C x_i + w_i`, with quadratic cost
/// weights `Q`, `R`. A fully observed plant has `C = I` and no `w`.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub noise_v: NoiseModel,
    pub noise_w: Option<NoiseModel>,
    pub noise_x1: NoiseModel,
}

impl LinearPlant {
    pub fn fully_observed(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        noise_v: NoiseModel,
        noise_x1: NoiseModel,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        Self::new(a, b, DMatrix::identity(n, n), q, r, noise_v, None, noise_x1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn partially_observed(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        noise_v: NoiseModel,
        noise_w: NoiseModel,
        noise_x1: NoiseModel,
    ) -> Result<Self, PlantError> {
        Self::new(a, b, c, q, r, noise_v, Some(noise_w), noise_x1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        noise_v: NoiseModel,
        noise_w: Option<NoiseModel>,
        noise_x1: NoiseModel,
    ) -> Result<Self, PlantError> {
        let n = a.nrows();
        let dim = |what: &str, got: (usize, usize), want: (usize, usize)| -> Result<(), PlantError> {
            if got == want {
                Ok(())
            } else {
                Err(PlantError::Dimension(format!(
                    "{what} is {}x{}, expected {}x{}",
                    got.0, got.1, want.0, want.1
                )))
            }
        };
        if n == 0 {
            return Err(PlantError::Dimension("A must be nonempty".into()));
        }
        dim("A", a.shape(), (n, n))?;
        let m = b.ncols();
        if m == 0 {
            return Err(PlantError::Dimension("B must have at least one column".into()));
        }
        dim("B", b.shape(), (n, m))?;
        let k = c.nrows();
        if k == 0 {
            return Err(PlantError::Dimension("C must have at least one row".into()));
        }
        dim("C", c.shape(), (k, n))?;
        dim("Q", q.shape(), (n, n))?;
        dim("R", r.shape(), (m, m))?;
        dim("Σ_V", noise_v.covariance().shape(), (n, n))?;
        dim("Σ_X1", noise_x1.covariance().shape(), (n, n))?;
        match &noise_w {
            Some(w) => dim("Σ_W", w.covariance().shape(), (k, k))?,
            None => {
                if c.shape() != (n, n) || (&c - DMatrix::<f64>::identity(n, n)).amax() != 0.0 {
                    return Err(PlantError::NotIdentityObservation(k, n));
                }
            }
        }
        Ok(Self {
            a,
            b,
            c,
            q,
            r,
            noise_v,
            noise_w,
            noise_x1,
        })
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Control dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Observation dimension.
    pub fn k(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.noise_w.is_none()
    }

    /// `[B, AB, ..., A^{n-1} B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        krylov(&self.a, &self.b)
    }

    /// `[C^T, A^T C^T, ..., (A^T)^{n-1} C^T]`.
    pub fn observability_matrix(&self) -> DMatrix<f64> {
        krylov(&self.a.transpose(), &self.c.transpose())
    }

    /// Whether every noise source is Gaussian (required by the Kalman-based results).
    pub fn is_gaussian(&self) -> bool {
        self.noise_v.is_gaussian()
            && self.noise_x1.is_gaussian()
            && self.noise_w.as_ref().map_or(true, NoiseModel::is_gaussian)
    }
}

fn krylov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for i in 0..n {
        out.view_mut((0, i * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub controllable: bool,
    pub observable: bool,
    pub rank_b: usize,
    pub psd_ok: bool,
    pub messages: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Rank tests for controllability/observability and PSD tests on `Q`, `R`.
pub fn validate(plant: &LinearPlant) -> ValidationReport {
    let n = plant.n();
    let mut messages = Vec::new();
    let ctrl_rank = linalg::numerical_rank(&plant.controllability_matrix());
    let controllable = ctrl_rank == n;
    if !controllable {
        messages.push(format!("(A, B) not controllable: controllability matrix has rank {ctrl_rank} < {n}"));
    }
    let obs_rank = linalg::numerical_rank(&plant.observability_matrix());
    let observable = obs_rank == n;
    if !observable {
        messages.push(format!("(A, C) not observable: observability matrix has rank {obs_rank} < {n}"));
    }
    let q_ok = linalg::is_symmetric(&plant.q) && linalg::is_psd(&plant.q);
    let r_ok = linalg::is_symmetric(&plant.r) && linalg::is_psd(&plant.r);
    if !q_ok {
        messages.push("Q is not symmetric positive semidefinite".into());
    }
    if !r_ok {
        messages.push("R is not symmetric positive semidefinite".into());
    }
    ValidationReport {
        controllable,
        observable,
        rank_b: linalg::numerical_rank(&plant.b),
        psd_ok: q_ok && r_ok,
        messages,
    }
}
