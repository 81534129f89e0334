//! Closed-loop Monte-Carlo simulation of the DPCM scheme with a
//! certainty-equivalence controller, the cost decomposition audit and
//! tradeoff sweeps.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundError};
use crate::linalg;
use crate::quantizer::{self, DpcmCodec, DpcmState, EntropyEstimate, IndexStream, Lattice, QuantizerError};
use crate::riccati::SolvedPlant;

/// Default post-start transient excluded from every statistic.
pub const DEFAULT_BURN_IN: usize = 1000;
/// Number of batches for batch-means standard errors.
pub const BATCHES: usize = 20;
/// `‖x‖` above this marks the run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
/// Minimum post-burn-in window for the cost decomposition.
pub const MIN_DECOMPOSE_WINDOW: usize = 10_000;
/// Fewest grid points a sweep accepts.
pub const MIN_SWEEP_POINTS: usize = 8;

/// Substream of the seeded generator for each noise source.
const STREAM_X1: u64 = 0;
const STREAM_V: u64 = 1;
const STREAM_W: u64 = 2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("partially observed simulation needs a Gaussian plant with a solved filter")]
    Unsupported,
    /// The DPCM codec measures distortion in `A^T M A`, which is singular when `rank L < n`.
    #[error("DPCM scheme needs A^T M A positive definite (smallest eigenvalue {min_eigenvalue:.3e})")]
    SingularWeight { min_eigenvalue: f64 },
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Bound(#[from] BoundError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullyObserved,
    PartiallyObserved,
}

/// What crosses the link from observer to controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Lattice DPCM with squared covering radius `d` in the `W` norm.
    Quantized { d: f64 },
    /// The encoder's estimate is delivered exactly.
    Unquantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub channel: Channel,
    /// Keep the full index stream in the result.
    pub keep_stream: bool,
}

impl SimConfig {
    pub fn quantized(horizon: usize, seed: u64, d: f64) -> Self {
        Self {
            horizon,
            seed,
            burn_in: DEFAULT_BURN_IN,
            channel: Channel::Quantized { d },
            keep_stream: false,
        }
    }

    pub fn unquantized(horizon: usize, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            burn_in: DEFAULT_BURN_IN,
            channel: Channel::Unquantized,
            keep_stream: false,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.horizon <= self.burn_in {
            return Err(SimError::Config(format!(
                "horizon {} must exceed burn-in {}",
                self.horizon, self.burn_in
            )));
        }
        if self.horizon - self.burn_in < BATCHES {
            return Err(SimError::Config(format!("need at least {BATCHES} post-burn-in steps")));
        }
        if let Channel::Quantized { d } = self.channel {
            if !(d > 0.0) || !d.is_finite() {
                return Err(SimError::Config(format!("distortion must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

/// Per-step averages of the separation terms over the post-burn-in window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDecomposition {
    /// `v^T S v`.
    pub c_hat: f64,
    /// `(x - x̂_enc)^T W (x - x̂_enc)`.
    pub e_hat: f64,
    /// `(x̂_enc - x̂_ctrl)^T W (x̂_enc - x̂_ctrl)`, i.e. the control mismatch in the `R + B^T S B` norm.
    pub d_hat: f64,
    /// `b̂ - (ĉ + ê + d̂)`.
    pub residual: f64,
    /// Batch-means standard error of `b̂`.
    pub b_std_error: f64,
    /// Batch-means standard error of the residual.
    pub residual_std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub mode: Mode,
    pub channel: Channel,
    pub horizon: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Mean of `x^T Q x + u^T R u` over the window.
    pub b_hat: f64,
    pub entropy: Option<EntropyEstimate>,
    pub costs: CostDecomposition,
    /// Step at which `‖x‖` crossed the divergence threshold.
    pub diverged_at: Option<usize>,
    /// Steps whose weighted reconstruction error exceeded `d`.
    pub distortion_violations: u64,
    pub max_weighted_error: f64,
    pub encoder_digest: String,
    pub decoder_digest: String,
    /// Noise vectors drawn from the generator.
    pub rng_draws: u64,
    /// Empirical covariance of the encoder estimate's innovation, row-major.
    pub innovation_covariance: Vec<Vec<f64>>,
    #[serde(skip)]
    pub stream: Option<IndexStream>,
}

impl SimResult {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Plug-in entropy per step, zero for the unquantized channel.
    pub fn h_hat(&self) -> f64 {
        self.entropy.map_or(0.0, |e| e.plug_in_nats)
    }

    /// The cost terms, provided the window is long enough to be meaningful.
    pub fn decompose(&self) -> Result<CostDecomposition, SimError> {
        decompose_cost(self)
    }
}

pub fn decompose_cost(result: &SimResult) -> Result<CostDecomposition, SimError> {
    let window = result.horizon - result.burn_in;
    if window < MIN_DECOMPOSE_WINDOW {
        return Err(SimError::Config(format!(
            "decomposition needs a window of at least {MIN_DECOMPOSE_WINDOW} steps, got {window}"
        )));
    }
    Ok(result.costs)
}

/// Per-step accumulator with batch means.
struct Batched {
    window: usize,
    burn_in: usize,
    sums: [f64; BATCHES],
}

impl Batched {
    fn new(burn_in: usize, window: usize) -> Self {
        Self {
            window,
            burn_in,
            sums: [0.0; BATCHES],
        }
    }

    fn add(&mut self, step: usize, v: f64) {
        if step >= self.burn_in {
            let k = ((step - self.burn_in) * BATCHES / self.window).min(BATCHES - 1);
            self.sums[k] += v;
        }
    }

    fn batch_sizes(&self) -> [f64; BATCHES] {
        let mut sizes = [0.0; BATCHES];
        for j in 0..self.window {
            sizes[(j * BATCHES / self.window).min(BATCHES - 1)] += 1.0;
        }
        sizes
    }

    fn mean(&self) -> f64 {
        self.sums.iter().sum::<f64>() / self.window as f64
    }

    fn std_error(&self) -> f64 {
        let sizes = self.batch_sizes();
        let means: Vec<f64> = self.sums.iter().zip(&sizes).map(|(s, n)| s / n).collect();
        let mu = means.iter().sum::<f64>() / BATCHES as f64;
        let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / (BATCHES - 1) as f64;
        (var / BATCHES as f64).sqrt()
    }
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn add_into(out: &mut [f64], x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += v);
}

/// Closed loop with the encoder seeing the state.
pub fn run_fully_observed(sp: &SolvedPlant, cfg: &SimConfig) -> Result<SimResult, SimError> {
    if !sp.plant.is_fully_observed() {
        return Err(SimError::Config("plant is partially observed".into()));
    }
    run(sp, cfg, Mode::FullyObserved)
}

/// Closed loop with a steady-state Kalman filter at the encoder.
pub fn run_partially_observed(sp: &SolvedPlant, cfg: &SimConfig) -> Result<SimResult, SimError> {
    if sp.filter.is_none() || !sp.plant.is_gaussian() {
        return Err(SimError::Unsupported);
    }
    run(sp, cfg, Mode::PartiallyObserved)
}

/// Dispatches on whether the plant has observation noise.
pub fn simulate(sp: &SolvedPlant, cfg: &SimConfig) -> Result<SimResult, SimError> {
    if sp.plant.is_fully_observed() {
        run_fully_observed(sp, cfg)
    } else {
        run_partially_observed(sp, cfg)
    }
}

fn run(sp: &SolvedPlant, cfg: &SimConfig, mode: Mode) -> Result<SimResult, SimError> {
    cfg.validate()?;
    let plant = &sp.plant;
    let (n, m, k) = (plant.n(), plant.m(), plant.k());
    let w = sp.weight();
    let a = &plant.a;
    let b = &plant.b;
    let s = &sp.control.s;
    let la = &sp.control.l * a;

    let codec = match cfg.channel {
        Channel::Quantized { d } => {
            let w_min = w.clone().symmetric_eigen().eigenvalues.min();
            if !(w_min > 1e-12 * w.amax().max(1.0)) {
                return Err(SimError::SingularWeight { min_eigenvalue: w_min });
            }
            let lattice = Lattice::for_dimension(n)?.scale_to_distortion(d)?;
            Some(DpcmCodec::new(a.clone(), Some(b.clone()), &w, lattice)?)
        }
        Channel::Unquantized => None,
    };
    let d_target = match cfg.channel {
        Channel::Quantized { d } => d,
        Channel::Unquantized => 0.0,
    };

    let mut rng_x1 = sub_rng(cfg.seed, STREAM_X1);
    let mut rng_v = sub_rng(cfg.seed, STREAM_V);
    let mut rng_w = sub_rng(cfg.seed, STREAM_W);

    let mut x = vec![0.0; n];
    let mut scratch_n = vec![0.0; n];
    plant.noise_x1.sample_into(&mut rng_x1, &mut x, &mut scratch_n);
    let mut rng_draws = 1u64;

    let mut enc = DpcmState::new(vec![0.0; n]);
    let mut dec = DpcmState::new(vec![0.0; n]);
    let mut x_ctrl = vec![0.0; n];
    let mut x_enc = vec![0.0; n];
    let mut pred = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut have_u = false;
    let mut v = vec![0.0; n];
    let mut wn = vec![0.0; k];
    let mut scratch_k = vec![0.0; k];
    let mut y = vec![0.0; k];
    let mut tmp_n = vec![0.0; n];
    let mut tmp_k = vec![0.0; k];
    let mut innov = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut bu = vec![0.0; n];

    let window = cfg.horizon - cfg.burn_in;
    let mut cost = Batched::new(cfg.burn_in, window);
    let mut resid = Batched::new(cfg.burn_in, window);
    let (mut c_sum, mut e_sum, mut d_sum) = (0.0, 0.0, 0.0);
    let mut innov_cov = DMatrix::<f64>::zeros(n, n);
    let mut stream = codec.as_ref().map(|_| IndexStream::with_capacity(n, cfg.horizon));
    let mut violations = 0u64;
    let mut max_err = 0.0f64;
    let mut diverged_at = None;

    for step in 0..cfg.horizon {
        // Prediction of the encoder estimate from the previous step.
        linalg::gemv_into(&mut pred, a, &x_enc);
        if have_u {
            linalg::gemv_into(&mut tmp_n, b, &u);
            add_into(&mut pred, &tmp_n);
        }
        match mode {
            Mode::FullyObserved => x_enc.copy_from_slice(&x),
            Mode::PartiallyObserved => {
                let filter = sp.filter.as_ref().expect("checked by caller");
                let noise_w = plant.noise_w.as_ref().expect("partially observed");
                noise_w.sample_into(&mut rng_w, &mut wn, &mut scratch_k);
                rng_draws += 1;
                linalg::gemv_into(&mut y, &plant.c, &x);
                add_into(&mut y, &wn);
                linalg::gemv_into(&mut tmp_k, &plant.c, &pred);
                y.iter_mut().zip(&tmp_k).for_each(|(yi, ci)| *yi -= ci);
                linalg::gemv_into(&mut tmp_n, &filter.k, &y);
                for i in 0..n {
                    x_enc[i] = pred[i] + tmp_n[i];
                }
            }
        }
        for i in 0..n {
            innov[i] = x_enc[i] - pred[i];
        }

        let u_prev = if have_u { Some(u.as_slice()) } else { None };
        match &codec {
            Some(codec) => {
                let e = enc.encode(codec, &x_enc, u_prev);
                let s_hat = dec.decode(codec, &e.index, u_prev)?;
                x_ctrl.copy_from_slice(s_hat);
                if e.weighted_error > d_target * (1.0 + 1e-9) {
                    violations += 1;
                }
                max_err = max_err.max(e.weighted_error);
                if let Some(st) = stream.as_mut() {
                    st.push(&e.index);
                }
            }
            None => x_ctrl.copy_from_slice(&x_enc),
        }

        // u = -L A x̂_ctrl.
        linalg::gemv_into(&mut u, &la, &x_ctrl);
        u.iter_mut().for_each(|ui| *ui = -*ui);
        have_u = true;

        plant.noise_v.sample_into(&mut rng_v, &mut v, &mut scratch_n);
        rng_draws += 1;

        if step >= cfg.burn_in {
            let b_i = linalg::quad_form(&plant.q, &x) + linalg::quad_form(&plant.r, &u);
            let c_i = linalg::quad_form(s, &v);
            for i in 0..n {
                diff[i] = x[i] - x_enc[i];
            }
            let e_i = linalg::quad_form(&w, &diff);
            for i in 0..n {
                diff[i] = x_enc[i] - x_ctrl[i];
            }
            let d_i = linalg::quad_form(&w, &diff);
            cost.add(step, b_i);
            resid.add(step, b_i - c_i - e_i - d_i);
            c_sum += c_i;
            e_sum += e_i;
            d_sum += d_i;
            for i in 0..n {
                for j in 0..n {
                    innov_cov[(i, j)] += innov[i] * innov[j];
                }
            }
        }

        // x_{i+1} = A x + B u + v.
        linalg::gemv_into(&mut tmp_n, a, &x);
        add_into(&mut tmp_n, &v);
        linalg::gemv_into(&mut bu, b, &u);
        add_into(&mut tmp_n, &bu);
        x.copy_from_slice(&tmp_n);
        if x.iter().map(|z| z * z).sum::<f64>().sqrt() > DIVERGENCE_THRESHOLD || x.iter().any(|z| !z.is_finite()) {
            diverged_at = Some(step);
            break;
        }
    }

    let wf = window as f64;
    let (b_hat, costs, entropy) = if diverged_at.is_some() {
        let nan = CostDecomposition {
            c_hat: f64::NAN,
            e_hat: f64::NAN,
            d_hat: f64::NAN,
            residual: f64::NAN,
            b_std_error: f64::NAN,
            residual_std_error: f64::NAN,
        };
        (f64::INFINITY, nan, None)
    } else {
        let b_hat = cost.mean();
        let costs = CostDecomposition {
            c_hat: c_sum / wf,
            e_hat: e_sum / wf,
            d_hat: d_sum / wf,
            residual: resid.mean(),
            b_std_error: cost.std_error(),
            residual_std_error: resid.std_error(),
        };
        let entropy = match &stream {
            Some(st) if st.len() > cfg.burn_in + 1000 => Some(quantizer::empirical_entropy(st, cfg.burn_in)?),
            Some(_) => None,
            None => None,
        };
        (b_hat, costs, entropy)
    };
    innov_cov /= wf;
    Ok(SimResult {
        mode,
        channel: cfg.channel,
        horizon: cfg.horizon,
        burn_in: cfg.burn_in,
        seed: cfg.seed,
        b_hat,
        entropy,
        costs,
        diverged_at,
        distortion_violations: violations,
        max_weighted_error: max_err,
        encoder_digest: enc.digest(),
        decoder_digest: dec.digest(),
        rng_draws,
        innovation_covariance: (0..n).map(|i| innov_cov.row(i).iter().copied().collect()).collect(),
        stream: if cfg.keep_stream { stream } else { None },
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub d: f64,
    pub seed: u64,
    pub b_hat: f64,
    pub h_hat_nats: f64,
    /// Matching converse at `b̂`; `None` when `b̂ <= b_min`.
    pub lower_bound_nats: Option<f64>,
    /// Entropy-cost upper bound at `b̂`; `None` when unavailable.
    pub upper_bound_nats: Option<f64>,
    pub costs: CostDecomposition,
    pub diverged: bool,
    pub distortion_violations: u64,
    pub digests_match: bool,
}

impl SweepPoint {
    pub fn gap(&self) -> Option<f64> {
        self.lower_bound_nats.map(|l| self.h_hat_nats - l)
    }

    /// True unless the empirical entropy sits below the converse.
    pub fn dominates(&self) -> bool {
        self.diverged || self.lower_bound_nats.is_none_or(|l| self.h_hat_nats >= l)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeoffCurve {
    pub mode: Mode,
    pub b_min: f64,
    /// Converged points sorted by `b̂`, then diverged points in grid order.
    pub points: Vec<SweepPoint>,
}

impl TradeoffCurve {
    pub fn converged(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(|p| !p.diverged)
    }

    pub fn diverged(&self) -> impl Iterator<Item = &SweepPoint> {
        self.points.iter().filter(|p| p.diverged)
    }

    /// Points that fall below the converse; must be empty.
    pub fn dominance_violations(&self) -> Vec<&SweepPoint> {
        self.points.iter().filter(|p| !p.dominates()).collect()
    }

    pub fn distortion_violations(&self) -> u64 {
        self.points.iter().map(|p| p.distortion_violations).sum()
    }

    /// Every hard check passed: dominance, distortion guarantee, codec sync.
    pub fn hard_checks_pass(&self) -> bool {
        self.dominance_violations().is_empty()
            && self.distortion_violations() == 0
            && self.points.iter().all(|p| p.digests_match)
    }
}

/// Seed for grid point `index`, independent of thread scheduling.
pub fn point_seed(base: u64, index: usize) -> u64 {
    // splitmix64 finaliser.
    let mut z = base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one simulation per distortion in parallel and pairs each measured
/// `(b̂, ĥ)` with the matching converse and upper bound at `b̂`.
pub fn sweep(sp: &SolvedPlant, base: &SimConfig, d_grid: &[f64]) -> Result<TradeoffCurve, SimError> {
    if d_grid.len() < MIN_SWEEP_POINTS {
        return Err(SimError::Config(format!(
            "sweep needs at least {MIN_SWEEP_POINTS} distortions, got {}",
            d_grid.len()
        )));
    }
    if d_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SimError::Config("distortion grid must be strictly increasing".into()));
    }
    let mode = if sp.plant.is_fully_observed() {
        Mode::FullyObserved
    } else {
        Mode::PartiallyObserved
    };
    let b_min = match mode {
        Mode::FullyObserved => bounds::b_min_fully_observed(sp),
        Mode::PartiallyObserved => sp.b_min,
    };
    let results: Vec<Result<SweepPoint, SimError>> = d_grid
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut cfg = base.clone();
            cfg.channel = Channel::Quantized { d };
            cfg.seed = point_seed(base.seed, i);
            cfg.keep_stream = false;
            let r = simulate(sp, &cfg)?;
            let diverged = r.diverged();
            let (lower, upper) = if diverged || !(r.b_hat > b_min) {
                (None, None)
            } else {
                let lower = match mode {
                    Mode::FullyObserved => bounds::lower_fully_observed(sp, r.b_hat)?,
                    Mode::PartiallyObserved => bounds::lower_partially_observed(sp, r.b_hat)?,
                };
                let upper = bounds::entropy_cost_upper(sp, r.b_hat).ok().map(|u| u.entropy_nats);
                (Some(lower.max(0.0)), upper)
            };
            Ok(SweepPoint {
                d,
                seed: cfg.seed,
                b_hat: r.b_hat,
                h_hat_nats: r.h_hat(),
                lower_bound_nats: lower,
                upper_bound_nats: upper,
                costs: r.costs,
                diverged,
                distortion_violations: r.distortion_violations,
                digests_match: r.encoder_digest == r.decoder_digest,
            })
        })
        .collect();
    let mut points = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|p, q| p.diverged.cmp(&q.diverged).then(p.b_hat.total_cmp(&q.b_hat)));
    Ok(TradeoffCurve { mode, b_min, points })
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| {
            if i + 1 == count {
                hi
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}
