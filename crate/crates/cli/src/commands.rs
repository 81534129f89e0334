//! Subcommand bodies. Each returns what to print, what to write and which
//! hard checks failed; `main` does the I/O.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use ratecost::bounds::{self, BoundKind};
use ratecost::quantizer::Lattice;
use ratecost::simloop::{self, Channel, Mode, SimConfig, TradeoffCurve};
use ratecost::{validate, SolvedPlant};
use serde::Serialize;

use crate::config::{plant_mode, ExperimentConfig};
use crate::svg::{self, PlotData, PlotPoint};
use crate::tables::{self, DecomposeRow, SimRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the config's seed list.
    pub seed: Option<u64>,
    pub format: Format,
    pub svg: bool,
}

#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    /// Relative file names and contents, written under the output directory.
    pub files: Vec<(PathBuf, Vec<u8>)>,
    pub hard_failures: Vec<String>,
}

fn seeds(cfg: &ExperimentConfig, opts: &RunOptions) -> Vec<u64> {
    match opts.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn render<T: Serialize>(rows: &[T], header: &[&str], format: Format) -> Result<String> {
    match format {
        Format::Csv => tables::to_csv(rows, header),
        Format::Json => Ok(serde_json::to_string_pretty(rows)? + "\n"),
    }
}

fn table_outcome<T: Serialize>(name: &str, rows: &[T], header: &[&str], format: Format) -> Result<Outcome> {
    let text = render(rows, header, format)?;
    Ok(Outcome {
        files: vec![(PathBuf::from(format!("{name}.{}", format.ext())), text.clone().into_bytes())],
        stdout: text,
        hard_failures: Vec::new(),
    })
}

pub fn bound(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let sp = cfg.solve()?;
    let kinds = match cfg.bound_kinds()? {
        Some(k) => k,
        None => tables::default_kinds(plant_mode(&sp.plant)),
    };
    let b_values = cfg.b_values(sp.b_min)?;
    let rows = tables::bound_table(&sp, &kinds, &b_values, cfg.i_max);
    table_outcome("bounds", &rows, &tables::BOUND_COLUMNS, opts.format)
}

fn base_config(cfg: &ExperimentConfig, seed: u64, d: f64) -> SimConfig {
    let mut s = SimConfig::quantized(cfg.horizon, seed, d);
    s.burn_in = cfg.burn_in;
    s.keep_stream = cfg.output.index_streams;
    s
}

pub fn simulate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let sp = cfg.solve()?;
    let d = cfg.single_distortion()?;
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for seed in seeds(cfg, opts) {
        let r = simloop::simulate(&sp, &base_config(cfg, seed, d)).with_context(|| format!("simulation with seed {seed}"))?;
        if let Some(stream) = &r.stream {
            let mut buf = Vec::new();
            stream.write_binary(&mut buf)?;
            files.push((PathBuf::from(format!("indices_seed{seed}.bin")), buf));
        }
        rows.push(tables::sim_row(&sp, d, &r));
    }
    let mut out = table_outcome("simulate", &rows, &tables::SIM_COLUMNS, opts.format)?;
    out.files.extend(files);
    out.hard_failures = rows.iter().flat_map(SimRow::hard_failures).collect();
    Ok(out)
}

/// Converse and upper-bound curves over `(b_min, x_max]`.
fn curves(sp: &SolvedPlant, x_max: f64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    const SAMPLES: usize = 160;
    let span = x_max - sp.b_min;
    let mut lower = Vec::with_capacity(SAMPLES);
    let mut upper = Vec::with_capacity(SAMPLES);
    for b in simloop::log_grid(span * 1e-3, span, SAMPLES).into_iter().map(|e| sp.b_min + e) {
        if let Ok(l) = tables::matching_lower(sp, b) {
            lower.push((b, l.max(0.0)));
        }
        if let Ok(u) = bounds::entropy_cost_upper(sp, b) {
            upper.push((b, u.entropy_nats));
        }
    }
    (lower, upper)
}

pub fn plot_data(sp: &SolvedPlant, title: &str, curves_in: &[TradeoffCurve]) -> PlotData {
    let points: Vec<PlotPoint> = curves_in
        .iter()
        .flat_map(|c| c.points.iter())
        .map(|p| PlotPoint {
            d: p.d,
            b: p.b_hat,
            nats: p.h_hat_nats,
            diverged: p.diverged,
        })
        .collect();
    let x_max = points
        .iter()
        .filter(|p| !p.diverged && p.b.is_finite())
        .map(|p| p.b)
        .fold(sp.b_min * 2.0, f64::max)
        * 1.05;
    let (lower, upper) = curves(sp, x_max);
    PlotData {
        title: title.to_string(),
        b_min: sp.b_min,
        lower,
        upper,
        points,
    }
}

#[derive(Serialize)]
struct SweepReport<'a> {
    name: Option<&'a str>,
    mode: Mode,
    b_min: f64,
    curves: &'a [TradeoffCurve],
}

pub fn sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let sp = cfg.solve()?;
    let d_grid = cfg.d_values()?;
    let mut curves_out = Vec::new();
    let mut rows = Vec::new();
    for seed in seeds(cfg, opts) {
        let curve = simloop::sweep(&sp, &base_config(cfg, seed, d_grid[0]), d_grid).with_context(|| format!("sweep with seed {seed}"))?;
        for p in &curve.points {
            rows.push(SimRow {
                d: p.d,
                b_hat: p.b_hat,
                h_hat_nats: p.h_hat_nats,
                h_hat_bits: ratecost::nats_to_bits(p.h_hat_nats),
                lower_bound_nats: p.lower_bound_nats,
                upper_bound_nats: p.upper_bound_nats,
                c_hat: p.costs.c_hat,
                e_hat: p.costs.e_hat,
                d_hat: p.costs.d_hat,
                residual: p.costs.residual,
                diverged: p.diverged,
                seed: p.seed,
                lower_bound_bits: p.lower_bound_nats.map(ratecost::nats_to_bits),
                upper_bound_bits: p.upper_bound_nats.map(ratecost::nats_to_bits),
                distortion_violations: p.distortion_violations,
                digests_match: p.digests_match,
            });
        }
        curves_out.push(curve);
    }
    let mut out = match opts.format {
        Format::Csv => table_outcome("sweep", &rows, &tables::SIM_COLUMNS, Format::Csv)?,
        Format::Json => {
            let report = SweepReport {
                name: cfg.name.as_deref(),
                mode: plant_mode(&sp.plant),
                b_min: sp.b_min,
                curves: &curves_out,
            };
            let text = serde_json::to_string_pretty(&report)? + "\n";
            Outcome {
                files: vec![(PathBuf::from("sweep.json"), text.clone().into_bytes())],
                stdout: text,
                hard_failures: Vec::new(),
            }
        }
    };
    out.hard_failures = rows.iter().flat_map(SimRow::hard_failures).collect();
    if opts.svg || cfg.output.svg {
        let title = cfg.name.clone().unwrap_or_else(|| "rate versus cost".into());
        let svg_text = svg::render(&plot_data(&sp, &title, &curves_out));
        out.files.push((PathBuf::from("sweep.svg"), svg_text.into_bytes()));
    }
    Ok(out)
}

pub fn decompose(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Outcome> {
    let sp = cfg.solve()?;
    let d = cfg.single_distortion()?;
    let seed = seeds(cfg, opts)[0];
    let ref_c = (sp.plant.noise_v.covariance() * &sp.control.s).trace();
    let ref_e = sp.filter.as_ref().map_or(0.0, |f| (&f.sigma * sp.weight()).trace());
    let mut rows = Vec::new();
    for channel in [Channel::Quantized { d }, Channel::Unquantized] {
        let mut sc = base_config(cfg, seed, d);
        sc.channel = channel;
        sc.keep_stream = false;
        let r = simloop::simulate(&sp, &sc)?;
        if r.diverged() {
            bail!("{channel:?} run diverged at step {}", r.diverged_at.unwrap_or(0));
        }
        let c = r.decompose()?;
        rows.push(DecomposeRow {
            run: match channel {
                Channel::Quantized { .. } => "quantized".into(),
                Channel::Unquantized => "unquantized".into(),
            },
            d: match channel {
                Channel::Quantized { d } => Some(d),
                Channel::Unquantized => None,
            },
            b_hat: r.b_hat,
            b_std_error: c.b_std_error,
            c_hat: c.c_hat,
            e_hat: c.e_hat,
            d_hat: c.d_hat,
            residual: c.residual,
            residual_std_error: c.residual_std_error,
            ref_c,
            ref_e,
            ref_b_min: sp.b_min,
        });
    }
    table_outcome("decompose", &rows, &tables::DECOMPOSE_COLUMNS, opts.format)
}

#[derive(Serialize)]
struct LatticeInfo {
    family: String,
    alpha_n: f64,
    n_log_rho: f64,
    rogers_c: f64,
    rogers_reference: Option<f64>,
}

/// Row-major nested arrays, the config's matrix layout.
type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct ControlInfo {
    s: Rows,
    m: Rows,
    l: Rows,
    g: Rows,
    iterations: usize,
    residual: f64,
    pseudo_inverse_used: bool,
}

#[derive(Serialize)]
struct FilterInfo {
    p: Rows,
    k: Rows,
    sigma: Rows,
    n: Rows,
    output_innovation: Rows,
    iterations: usize,
    residual: f64,
}

#[derive(Serialize)]
struct ValidateReport {
    name: Option<String>,
    mode: Mode,
    n: usize,
    m: usize,
    k: usize,
    checks: ratecost::ValidationReport,
    b_min: f64,
    unstable_floor_nats: f64,
    control: ControlInfo,
    filter: Option<FilterInfo>,
    weight: Rows,
    lattice: Option<LatticeInfo>,
    bounds: Vec<String>,
}

/// Checks the config and plant; prints the solved quantities as JSON.
pub fn validate_config(cfg: &ExperimentConfig, _opts: &RunOptions) -> Result<Outcome> {
    let plant = cfg.build_plant()?;
    let checks = validate(&plant);
    if !checks.is_ok() {
        bail!("plant failed validation: {}", checks.messages.join("; "));
    }
    let sp = SolvedPlant::solve(plant).context("Riccati solution failed")?;
    let n = sp.plant.n();
    let lattice = Lattice::for_dimension(n).ok().map(|l| LatticeInfo {
        family: format!("{:?}", l.family()),
        alpha_n: bounds::alpha_n(n),
        n_log_rho: n as f64 * bounds::scheme_rho(n).ln(),
        rogers_c: cfg.rogers_c,
        rogers_reference: bounds::rogers_reference(n, cfg.rogers_c),
    });
    let kinds: Vec<BoundKind> = cfg.bound_kinds()?.unwrap_or_else(|| tables::default_kinds(plant_mode(&sp.plant)));
    let report = ValidateReport {
        name: cfg.name.clone(),
        mode: plant_mode(&sp.plant),
        n,
        m: sp.plant.m(),
        k: sp.plant.k(),
        checks,
        b_min: sp.b_min,
        unstable_floor_nats: bounds::unstable_floor(&sp.plant.a),
        weight: rows(&sp.weight()),
        control: ControlInfo {
            s: rows(&sp.control.s),
            m: rows(&sp.control.m),
            l: rows(&sp.control.l),
            g: rows(&sp.control.g),
            iterations: sp.control.iterations,
            residual: sp.control.residual,
            pseudo_inverse_used: sp.control.pseudo_inverse_used,
        },
        filter: sp.filter.as_ref().map(|f| FilterInfo {
            p: rows(&f.p),
            k: rows(&f.k),
            sigma: rows(&f.sigma),
            n: rows(&f.n),
            output_innovation: rows(&f.output_innovation),
            iterations: f.iterations,
            residual: f.residual,
        }),
        lattice,
        bounds: kinds.iter().map(|k| k.name().to_string()).collect(),
    };
    Ok(Outcome {
        stdout: serde_json::to_string_pretty(&report)? + "\n",
        ..Default::default()
    })
}
