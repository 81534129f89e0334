//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ratecost::bounds::{self, DEFAULT_I_MAX};
use ratecost::quantizer::Lattice;
use ratecost::simloop::{self, log_grid, SimConfig, TradeoffCurve};
use ratecost::{solve_control, solve_filter, LinearPlant, NoiseFamily, NoiseModel, SolvedPlant};

const T: usize = 1_000_000;
const SEED: u64 = 20_240_601;

// Closed forms for A = 2, B = C = Q = R = 1, unit noise variances.
fn s_oracle() -> f64 {
    2.0 + 5f64.sqrt()
}
fn m_oracle() -> f64 {
    (7.0 + 3.0 * 5f64.sqrt()) / 4.0
}
fn l_oracle() -> f64 {
    (1.0 + 5f64.sqrt()) / 4.0
}
fn n_oracle() -> f64 {
    // P^2 / (P + 1) with P = 2 + sqrt 5.
    let p = s_oracle();
    p * p / (p + 1.0)
}
fn b_min_partial_oracle() -> f64 {
    // tr(Σ_V S) + Σ A^T M A with Σ = P / (P + 1).
    let p = s_oracle();
    s_oracle() + p / (p + 1.0) * 4.0 * m_oracle()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn scalar_full(family: NoiseFamily) -> SolvedPlant {
    let v = NoiseModel::scalar(family, 1.0).unwrap();
    let x1 = NoiseModel::scalar(NoiseFamily::Gaussian, 1.0).unwrap();
    SolvedPlant::solve(LinearPlant::fully_observed(m1(2.0), m1(1.0), m1(1.0), m1(1.0), v, x1).unwrap()).unwrap()
}

fn scalar_partial() -> SolvedPlant {
    let g = NoiseModel::scalar(NoiseFamily::Gaussian, 1.0).unwrap();
    SolvedPlant::solve(
        LinearPlant::partially_observed(m1(2.0), m1(1.0), m1(1.0), m1(1.0), m1(1.0), g.clone(), g.clone(), g).unwrap(),
    )
    .unwrap()
}

fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / y.abs().max(1e-300)
}

fn c1_riccati() -> Outcome {
    let start = Instant::now();
    let full = scalar_full(NoiseFamily::Gaussian);
    let ctrl = solve_control(&full.plant).unwrap();
    let part = scalar_partial();
    let filt = solve_filter(&part.plant).unwrap();
    let checks = [
        ("S", ctrl.s[(0, 0)], s_oracle()),
        ("M", ctrl.m[(0, 0)], m_oracle()),
        ("L", ctrl.l[(0, 0)], l_oracle()),
        ("P", filt.p[(0, 0)], s_oracle()),
        ("K", filt.k[(0, 0)], l_oracle()),
        ("Sigma", filt.sigma[(0, 0)], l_oracle()),
        ("N", filt.n[(0, 0)], n_oracle()),
    ];
    let elapsed = start.elapsed();
    let worst = checks.iter().map(|(_, x, y)| (x - y).abs()).fold(0.0, f64::max);
    let n_ok = (n_oracle() - 3.427_051_0).abs() < 1e-7 && (l_oracle() - 0.809_017_0).abs() < 1e-7;
    Outcome {
        pass: worst < 1e-9 && n_ok && elapsed < Duration::from_secs(1),
        detail: format!("max |error| {worst:.2e} over S, M, L, P, K, Σ, N; {elapsed:.2?}"),
    }
}

fn c2_exactness() -> Outcome {
    let sp = scalar_full(NoiseFamily::Gaussian);
    let bmin = bounds::b_min_fully_observed(&sp);
    let w = 4.0 * m_oracle();
    let mut worst = 0.0f64;
    for i in 0..50 {
        let d = 10f64.powf(-3.0 + 6.0 * i as f64 / 49.0);
        let exact = 0.5 * (4.0 + w * 1.0 / d).ln();
        worst = worst.max((bounds::lower_fully_observed(&sp, bmin + d).unwrap() - exact).abs());
    }
    Outcome {
        pass: worst < 1e-9,
        detail: format!("max |bound - scalar Gaussian rate| {worst:.2e} over 50 points, d in [1e-3, 1e3]"),
    }
}

fn plant_2x2(a: [f64; 4], b: DMatrix<f64>, noise: NoiseModel) -> SolvedPlant {
    let n = 2;
    let m = b.ncols();
    SolvedPlant::solve(
        LinearPlant::fully_observed(
            DMatrix::from_row_slice(2, 2, &a),
            b,
            DMatrix::identity(n, n),
            DMatrix::identity(m, m),
            noise.clone(),
            noise,
        )
        .unwrap(),
    )
    .unwrap()
}

fn c3_reductions() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let grid = [0.05, 0.5, 2.0, 20.0];

    // Projection with ell = n and J = I (diagonal A, Λ = M).
    let diag_instances = [
        scalar_full(NoiseFamily::Gaussian),
        scalar_full(NoiseFamily::Laplace),
        plant_2x2(
            [2.0, 0.0, 0.0, 1.5],
            DMatrix::identity(2, 2),
            NoiseModel::gaussian(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap(),
        ),
    ];
    let mut count_proj = 0;
    for sp in &diag_instances {
        let n = sp.plant.n();
        let lambda: Vec<f64> = (0..n).map(|i| sp.control.m[(i, i)]).collect();
        let proj =
            bounds::ProjectionSpec::with_basis(&sp.plant.a, &sp.control.m, DMatrix::identity(n, n), n, Some(lambda)).unwrap();
        let bmin = bounds::b_min_fully_observed(sp);
        for d in grid {
            let x = bounds::lower_projected(sp, &proj, bmin + d).unwrap();
            let y = bounds::lower_fully_observed(sp, bmin + d).unwrap();
            worst = worst.max(rel(x, y));
        }
        count_proj += 1;
    }

    // Low-rank control with m = n, including a non-normal 2x2 instance.
    let square = [
        scalar_full(NoiseFamily::Gaussian),
        scalar_full(NoiseFamily::Laplace),
        plant_2x2(
            [1.2, 0.5, -0.3, 0.9],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]),
            NoiseModel::gaussian(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap(),
        ),
    ];
    let mut count_low_rank = 0;
    for sp in &square {
        let bmin = bounds::b_min_fully_observed(sp);
        for d in grid {
            let x = bounds::lower_low_rank_control(sp, bmin + d, DEFAULT_I_MAX).unwrap().rate_nats;
            let y = bounds::lower_fully_observed(sp, bmin + d).unwrap();
            worst = worst.max(rel(x, y));
        }
        count_low_rank += 1;
    }

    // Low-rank partially observed with k = m = n.
    let g1 = NoiseModel::scalar(NoiseFamily::Gaussian, 1.0).unwrap();
    let g2 = |c: &[f64]| NoiseModel::gaussian(DMatrix::from_row_slice(2, 2, c)).unwrap();
    let partial = [
        scalar_partial(),
        SolvedPlant::solve(
            LinearPlant::partially_observed(m1(1.5), m1(0.7), m1(2.0), m1(3.0), m1(0.5), g1.clone(), g1.clone(), g1.clone())
                .unwrap(),
        )
        .unwrap(),
        SolvedPlant::solve(
            LinearPlant::partially_observed(
                DMatrix::from_row_slice(2, 2, &[1.1, 0.4, 0.0, 0.8]),
                DMatrix::identity(2, 2),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]),
                DMatrix::identity(2, 2),
                DMatrix::identity(2, 2),
                g2(&[1.0, 0.2, 0.2, 0.5]),
                g2(&[0.3, 0.0, 0.0, 0.4]),
                g2(&[1.0, 0.0, 0.0, 1.0]),
            )
            .unwrap(),
        )
        .unwrap(),
    ];
    let mut count_partial = 0;
    for sp in &partial {
        for d in grid {
            let x = bounds::lower_low_rank_partial(sp, sp.b_min + d, DEFAULT_I_MAX).unwrap().rate_nats;
            let y = bounds::lower_partially_observed(sp, sp.b_min + d).unwrap();
            worst = worst.max(rel(x, y));
        }
        count_partial += 1;
    }

    // Low-rank causal SLB with k = m = n against the plain causal SLB.
    let slb_instances: [(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, NoiseModel); 3] = [
        (m1(2.0), m1(1.5), m1(0.8), NoiseModel::scalar(NoiseFamily::Gaussian, 1.0).unwrap()),
        (m1(0.7), m1(3.0), m1(1.0), NoiseModel::scalar(NoiseFamily::Laplace, 2.0).unwrap()),
        (
            DMatrix::from_row_slice(2, 2, &[1.1, 0.4, -0.2, 0.9]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]),
            NoiseModel::gaussian(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.4])).unwrap(),
        ),
    ];
    let mut count_slb = 0;
    for (a, l, k, vp) in &slb_instances {
        let n = a.nrows();
        let a_root = a.determinant().abs().powf(1.0 / n as f64);
        let w = (l.transpose() * l).determinant().powf(1.0 / n as f64);
        // N(K V') = |det K|^{2/n} N(V').
        let nv = k.determinant().abs().powf(2.0 / n as f64) * vp.entropy_power().unwrap();
        for d in grid {
            let x = bounds::causal_slb_low_rank(a, l, k, vp, d, DEFAULT_I_MAX).unwrap().rate_nats;
            let y = bounds::causal_slb(a_root, w, nv, n, d).unwrap();
            worst = worst.max(rel(x, y));
        }
        count_slb += 1;
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: worst <= 1e-9 && elapsed < Duration::from_secs(10),
        detail: format!(
            "max rel. error {worst:.2e} (projection {count_proj}, low-rank control {count_low_rank}, \
             low-rank partial {count_partial}, low-rank SLB {count_slb} instances); {elapsed:.2?}"
        ),
    }
}

struct SweepSummary {
    curve: TradeoffCurve,
    elapsed: Duration,
}

fn run_sweep(sp: &SolvedPlant, grid: &[f64], seed: u64) -> SweepSummary {
    let start = Instant::now();
    let cfg = SimConfig::quantized(T, seed, 1.0);
    let curve = simloop::sweep(sp, &cfg, grid).unwrap();
    SweepSummary {
        curve,
        elapsed: start.elapsed(),
    }
}

fn c4_fig_rdl(s: &SweepSummary) -> Outcome {
    let curve = &s.curve;
    let bmin = curve.b_min;
    let dominance = curve.dominance_violations().is_empty() && curve.converged().count() == 12;
    let in_range: Vec<_> = curve
        .converged()
        .filter(|p| p.b_hat >= bmin + 0.1 && p.b_hat <= bmin + 10.0)
        .collect();
    let max_gap = in_range.iter().filter_map(|p| p.gap()).fold(f64::NEG_INFINITY, f64::max);
    let pts: Vec<_> = curve.converged().collect();
    let gap_small = pts.first().and_then(|p| p.gap()).unwrap_or(f64::NAN);
    let gap_large = pts.last().and_then(|p| p.gap()).unwrap_or(f64::NAN);
    let pass = dominance
        && !in_range.is_empty()
        && max_gap <= 0.6
        && gap_small <= gap_large
        && s.elapsed < Duration::from_secs(300);
    Outcome {
        pass,
        detail: format!(
            "dominance {}, max gap {max_gap:.3} nat over {} points in [b_min+0.1, b_min+10], \
             gap at smallest b̂ {gap_small:.3} vs largest {gap_large:.3}; {:.1?}",
            if dominance { "ok" } else { "VIOLATED" },
            in_range.len(),
            s.elapsed
        ),
    }
}

fn c5_separation() -> Outcome {
    let full = scalar_full(NoiseFamily::Gaussian);
    let part = scalar_partial();
    let rf = simloop::run_fully_observed(&full, &SimConfig::quantized(T, SEED, 1.0)).unwrap();
    let rp = simloop::run_partially_observed(&part, &SimConfig::quantized(T, SEED + 1, 1.0)).unwrap();
    let ru = simloop::run_partially_observed(&part, &SimConfig::unquantized(T, SEED + 2)).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, r) in [("full", &rf), ("partial", &rp), ("unquantized", &ru)] {
        let c = r.decompose().unwrap();
        let z = c.residual.abs() / c.b_std_error;
        ok &= z <= 3.0;
        let c_rel = rel(c.c_hat, s_oracle());
        ok &= c_rel <= 0.01;
        parts.push(format!("{name}: |residual| = {z:.2} SE, ĉ off by {:.3}%", 100.0 * c_rel));
    }
    let b_rel = rel(ru.b_hat, b_min_partial_oracle());
    ok &= b_rel <= 0.01 && ru.costs.d_hat == 0.0;
    parts.push(format!("unquantized b̂ = {:.4} ({:.3}% from {:.4})", ru.b_hat, 100.0 * b_rel, b_min_partial_oracle()));
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

fn covering_violations(n: usize, samples: usize) -> usize {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(n as u64);
    let l = Lattice::for_dimension(n).unwrap().scale_to_distortion(1.0).unwrap();
    let g = l.generator();
    let r = l.covering_radius();
    let mut bad = 0;
    for _ in 0..samples {
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let x: Vec<f64> = (0..n).map(|j| (0..n).map(|i| u[i] * g[(i, j)]).sum()).collect();
        let p = l.point(&l.nearest(&x)).unwrap();
        let d = p.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if d > r * (1.0 + 1e-9) {
            bad += 1;
        }
    }
    bad
}

fn c6_quantizer(sweeps: &[&SweepSummary]) -> Outcome {
    let cover: usize = (1..=4).map(|n| covering_violations(n, 100_000)).sum();
    let steps: usize = sweeps.iter().map(|s| s.curve.points.len() * T).sum();
    let dist: u64 = sweeps.iter().map(|s| s.curve.distortion_violations()).sum();
    let sync = sweeps.iter().all(|s| s.curve.points.iter().all(|p| p.digests_match));
    Outcome {
        pass: cover == 0 && dist == 0 && sync,
        detail: format!(
            "covering violations {cover} (4 x 1e5 samples), distortion violations {dist} over {steps} steps, \
             codec digests {}",
            if sync { "equal" } else { "DIFFER" }
        ),
    }
}

fn c7_floor(s: &SweepSummary) -> Outcome {
    let sp = scalar_full(NoiseFamily::Gaussian);
    let asym = bounds::lower_fully_observed(&sp, 1e6).unwrap();
    let asym_err = (asym - 2f64.ln()).abs();
    let min_h = s.curve.converged().map(|p| p.h_hat_nats).fold(f64::INFINITY, f64::min);
    let finite = s.curve.converged().count();
    Outcome {
        pass: asym_err <= 1e-3 && min_h >= 2f64.ln() - 0.05 && finite > 0,
        detail: format!(
            "|bound(1e6) - ln 2| = {asym_err:.2e}; min ĥ {min_h:.4} over {finite} finite-cost runs \
             (floor ln 2 - 0.05 = {:.4}), {} diverged",
            2f64.ln() - 0.05,
            s.curve.diverged().count()
        ),
    }
}

fn c8_partial(s: &SweepSummary) -> Outcome {
    let sp = scalar_partial();
    let value = bounds::lower_partially_observed(&sp, sp.b_min + 1.0).unwrap();
    let oracle = 2f64.ln() + 0.5 * (1.0 + 3.427_051_0f64.powi(2)).ln();
    let dominance = s.curve.dominance_violations().is_empty() && s.curve.converged().count() > 0;
    Outcome {
        pass: (value - oracle).abs() <= 1e-6 && dominance,
        detail: format!(
            "bound {value:.7} vs log 2 + ½ log(1 + 3.4270510²) = {oracle:.7}; the printed approximation 1.9746 \
             differs from this expression by {:.4}; sweep dominance {}",
            (1.9746 - oracle).abs(),
            if dominance { "ok" } else { "VIOLATED" }
        ),
    }
}

fn main() {
    // Ignore libtest flags such as --nocapture passed through by cargo.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |id: u32| filter.as_deref().is_none_or(|f| f == "all" || f == id.to_string());

    let start = Instant::now();
    let mut outcomes: Vec<(u32, &str, Outcome)> = Vec::new();
    if wanted(1) {
        outcomes.push((1, "Riccati oracles", c1_riccati()));
    }
    if wanted(2) {
        outcomes.push((2, "scalar Gaussian exactness", c2_exactness()));
    }
    if wanted(3) {
        outcomes.push((3, "reduction equalities", c3_reductions()));
    }
    let need_laplace = wanted(4) || wanted(6);
    let need_gauss = wanted(6) || wanted(7);
    let need_partial = wanted(6) || wanted(8);
    let laplace = need_laplace.then(|| run_sweep(&scalar_full(NoiseFamily::Laplace), &log_grid(0.3, 30.0, 12), SEED));
    let gauss = need_gauss.then(|| run_sweep(&scalar_full(NoiseFamily::Gaussian), &log_grid(0.3, 1e6, 12), SEED + 10));
    let partial = need_partial.then(|| run_sweep(&scalar_partial(), &log_grid(1.0, 100.0, 12), SEED + 20));
    if let (true, Some(s)) = (wanted(4), &laplace) {
        outcomes.push((4, "Laplace tradeoff curve", c4_fig_rdl(s)));
    }
    if wanted(5) {
        outcomes.push((5, "separation audit", c5_separation()));
    }
    if wanted(6) {
        let all: Vec<&SweepSummary> = [&laplace, &gauss, &partial].into_iter().flatten().collect();
        outcomes.push((6, "quantizer properties", c6_quantizer(&all)));
    }
    if let (true, Some(s)) = (wanted(7), &gauss) {
        outcomes.push((7, "asymptote and rate floor", c7_floor(s)));
    }
    if let (true, Some(s)) = (wanted(8), &partial) {
        outcomes.push((8, "partially observed bound", c8_partial(s)));
    }

    let mut failed = 0;
    for (id, name, o) in &outcomes {
        println!("criterion {id} [{name}]: {} -- {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1?})",
        outcomes.len() - failed,
        start.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
