//! Row types for the emitted tables and the bound evaluations behind them.

use anyhow::Result;
use nalgebra::DMatrix;
use ratecost::bounds::{self, BoundError, BoundKind, ProjectionSpec};
use ratecost::simloop::{Mode, SimResult};
use ratecost::{nats_to_bits, NoiseModel, SolvedPlant};
use serde::Serialize;

/// One bound at one cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub b: f64,
    pub kind: String,
    pub rate_nats: Option<f64>,
    pub rate_bits: Option<f64>,
    /// Lower limit on the best variable-rate code, `ψ^{-1}` of the rate in bits.
    pub varrate_lower_bits: Option<f64>,
    pub verified: bool,
    pub status: String,
}

/// One simulation, as emitted by `simulate` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub d: f64,
    pub b_hat: f64,
    pub h_hat_nats: f64,
    pub h_hat_bits: f64,
    pub lower_bound_nats: Option<f64>,
    pub upper_bound_nats: Option<f64>,
    pub c_hat: f64,
    pub e_hat: f64,
    pub d_hat: f64,
    pub residual: f64,
    pub diverged: bool,
    pub seed: u64,
    pub lower_bound_bits: Option<f64>,
    pub upper_bound_bits: Option<f64>,
    pub distortion_violations: u64,
    pub digests_match: bool,
}

/// Cost decomposition of one run next to its analytic references.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecomposeRow {
    pub run: String,
    pub d: Option<f64>,
    pub b_hat: f64,
    pub b_std_error: f64,
    pub c_hat: f64,
    pub e_hat: f64,
    pub d_hat: f64,
    pub residual: f64,
    pub residual_std_error: f64,
    /// `tr(Σ_V S)`.
    pub ref_c: f64,
    /// `tr(Σ A^T M A)`, zero when fully observed.
    pub ref_e: f64,
    pub ref_b_min: f64,
}

/// Kinds evaluated when the config does not list any.
pub fn default_kinds(mode: Mode) -> Vec<BoundKind> {
    match mode {
        Mode::FullyObserved => vec![
            BoundKind::FullyObserved,
            BoundKind::Projected,
            BoundKind::LowRankControl,
            BoundKind::UpperFullyObserved,
            BoundKind::UnstableFloor,
        ],
        Mode::PartiallyObserved => vec![
            BoundKind::PartiallyObserved,
            BoundKind::ProjectedPartial,
            BoundKind::LowRankPartial,
            BoundKind::UpperPartiallyObserved,
            BoundKind::UnstableFloor,
        ],
    }
}

/// Matching converse for the plant's mode.
pub fn matching_lower(sp: &SolvedPlant, b: f64) -> Result<f64, BoundError> {
    if sp.plant.is_fully_observed() {
        bounds::lower_fully_observed(sp, b)
    } else {
        bounds::lower_partially_observed(sp, b)
    }
}

/// Driving noise of the encoder estimate: `V` when fully observed, a
/// Gaussian with the innovation covariance `N` otherwise.
fn estimate_noise(sp: &SolvedPlant) -> Result<NoiseModel, BoundError> {
    match &sp.filter {
        None => Ok(sp.plant.noise_v.clone()),
        Some(f) => Ok(NoiseModel::gaussian(f.n.clone())?),
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

struct Eval {
    nats: f64,
    verified: bool,
    note: Option<String>,
}

fn evaluate(sp: &SolvedPlant, kind: BoundKind, b: f64, i_max: usize) -> Result<Eval, BoundError> {
    let plant = &sp.plant;
    let n = plant.n();
    let value = |nats: f64| Eval { nats, verified: true, note: None };
    let infimum = |r: bounds::InfimumBound| Eval {
        nats: r.rate_nats,
        verified: r.converged,
        note: (!r.converged).then(|| format!("infimum not settled within i_max={i_max}")),
    };
    // Causal SLB rows are indexed by cost through d = b - b_min.
    let slb_distortion = || -> Result<f64, BoundError> {
        if b > sp.b_min {
            Ok(b - sp.b_min)
        } else {
            Err(BoundError::Infeasible { b, b_min: sp.b_min })
        }
    };
    Ok(match kind {
        BoundKind::FullyObserved => value(bounds::lower_fully_observed(sp, b)?),
        BoundKind::PartiallyObserved => value(bounds::lower_partially_observed(sp, b)?),
        BoundKind::Projected => {
            let proj = ProjectionSpec::unstable(&plant.a, &sp.control.m)?;
            value(bounds::lower_projected(sp, &proj, b)?)
        }
        BoundKind::ProjectedPartial => {
            let proj = ProjectionSpec::unstable(&plant.a, &sp.control.m)?;
            value(bounds::lower_projected_partial(sp, &proj, b)?)
        }
        BoundKind::LowRankControl => infimum(bounds::lower_low_rank_control(sp, b, i_max)?),
        BoundKind::LowRankPartial => infimum(bounds::lower_low_rank_partial(sp, b, i_max)?),
        BoundKind::CausalSlb => {
            let d = slb_distortion()?;
            let a = (log_abs_det(&plant.a) / n as f64).exp();
            let w = (log_abs_det(&sp.weight()) / n as f64).exp();
            let nv = estimate_noise(sp)?.entropy_power()?;
            value(bounds::causal_slb(a, w, nv, n, d)?)
        }
        BoundKind::CausalSlbProjected => {
            let d = slb_distortion()?;
            let proj = ProjectionSpec::unstable(&plant.a, &sp.weight())?;
            value(bounds::causal_slb_projected(&proj, &estimate_noise(sp)?, d)?)
        }
        BoundKind::CausalSlbLowRank => {
            let d = slb_distortion()?;
            // A^T M A = F^T F with F = G^{1/2} L A.
            let f = sym_sqrt(&sp.control.g) * &sp.control.l * &plant.a;
            let k = DMatrix::identity(n, n);
            infimum(bounds::causal_slb_low_rank(&plant.a, &f, &k, &estimate_noise(sp)?, d, i_max)?)
        }
        BoundKind::UpperFullyObserved => {
            if !plant.is_fully_observed() {
                return Err(BoundError::Hypothesis("bound applies to fully observed plants".into()));
            }
            value(bounds::entropy_cost_upper(sp, b)?.entropy_nats)
        }
        BoundKind::UpperPartiallyObserved => {
            if plant.is_fully_observed() {
                return Err(BoundError::Hypothesis("bound applies to partially observed plants".into()));
            }
            value(bounds::entropy_cost_upper(sp, b)?.entropy_nats)
        }
        BoundKind::UnstableFloor => value(bounds::unstable_floor(&plant.a)),
    })
}

fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    match m.clone().lu().determinant().abs() {
        d if d > 0.0 => d.ln(),
        _ => f64::NEG_INFINITY,
    }
}

/// Evaluates one bound; failures become a status instead of an error so a
/// table can mix applicable and inapplicable kinds.
pub fn bound_row(sp: &SolvedPlant, kind: BoundKind, b: f64, i_max: usize) -> BoundRow {
    match evaluate(sp, kind, b, i_max) {
        Ok(Eval { nats, verified, note }) => {
            let point = bounds::BoundPoint::new(kind, b, nats, verified);
            let varrate = (!kind.is_upper() && kind != BoundKind::UnstableFloor)
                .then(|| bounds::psi_inv(point.rate_bits()));
            BoundRow {
                b,
                kind: kind.name().to_string(),
                rate_nats: Some(point.rate_nats),
                rate_bits: Some(point.rate_bits()),
                varrate_lower_bits: varrate,
                verified,
                status: note.unwrap_or_else(|| "ok".into()),
            }
        }
        Err(e) => {
            let status = match &e {
                BoundError::Infeasible { .. } => e.to_string(),
                other => format!("unavailable: {other}"),
            };
            BoundRow {
                b,
                kind: kind.name().to_string(),
                rate_nats: None,
                rate_bits: None,
                varrate_lower_bits: None,
                verified: false,
                status,
            }
        }
    }
}

pub fn bound_table(sp: &SolvedPlant, kinds: &[BoundKind], b_values: &[f64], i_max: usize) -> Vec<BoundRow> {
    b_values
        .iter()
        .flat_map(|&b| kinds.iter().map(move |&k| (b, k)))
        .map(|(b, k)| bound_row(sp, k, b, i_max))
        .collect()
}

/// Converse and upper bound at a measured cost; `None` when not finite-cost
/// or below `b_min`.
pub fn bounds_at(sp: &SolvedPlant, b_hat: f64) -> (Option<f64>, Option<f64>) {
    if !b_hat.is_finite() || !(b_hat > sp.b_min) {
        return (None, None);
    }
    let lower = matching_lower(sp, b_hat).ok().map(|x| x.max(0.0));
    let upper = bounds::entropy_cost_upper(sp, b_hat).ok().map(|u| u.entropy_nats);
    (lower, upper)
}

pub fn sim_row(sp: &SolvedPlant, d: f64, r: &SimResult) -> SimRow {
    let (lower, upper) = if r.diverged() { (None, None) } else { bounds_at(sp, r.b_hat) };
    let h = r.h_hat();
    SimRow {
        d,
        b_hat: r.b_hat,
        h_hat_nats: h,
        h_hat_bits: nats_to_bits(h),
        lower_bound_nats: lower,
        upper_bound_nats: upper,
        c_hat: r.costs.c_hat,
        e_hat: r.costs.e_hat,
        d_hat: r.costs.d_hat,
        residual: r.costs.residual,
        diverged: r.diverged(),
        seed: r.seed,
        lower_bound_bits: lower.map(nats_to_bits),
        upper_bound_bits: upper.map(nats_to_bits),
        distortion_violations: r.distortion_violations,
        digests_match: r.encoder_digest == r.decoder_digest,
    }
}

impl SimRow {
    /// Hard-check failures for this row.
    pub fn hard_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(l) = self.lower_bound_nats {
            if !self.diverged && self.h_hat_nats < l {
                out.push(format!(
                    "d={}: entropy {:.6} nats below the converse {:.6} at b̂={:.6}",
                    self.d, self.h_hat_nats, l, self.b_hat
                ));
            }
        }
        if self.distortion_violations > 0 {
            out.push(format!("d={}: {} distortion violations", self.d, self.distortion_violations));
        }
        if !self.digests_match {
            out.push(format!("d={}: encoder and decoder digests differ", self.d));
        }
        out
    }
}

/// CSV with a header row; `None` fields are empty.
pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub const BOUND_COLUMNS: [&str; 7] = ["b", "kind", "rate_nats", "rate_bits", "varrate_lower_bits", "verified", "status"];

pub const SIM_COLUMNS: [&str; 16] = [
    "d",
    "b_hat",
    "h_hat_nats",
    "h_hat_bits",
    "lower_bound_nats",
    "upper_bound_nats",
    "c_hat",
    "e_hat",
    "d_hat",
    "residual",
    "diverged",
    "seed",
    "lower_bound_bits",
    "upper_bound_bits",
    "distortion_violations",
    "digests_match",
];

pub const DECOMPOSE_COLUMNS: [&str; 12] = [
    "run",
    "d",
    "b_hat",
    "b_std_error",
    "c_hat",
    "e_hat",
    "d_hat",
    "residual",
    "residual_std_error",
    "ref_c",
    "ref_e",
    "ref_b_min",
];
