//! Experiment configuration: JSON in, validated plant and grids out.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use ratecost::bounds::{BoundKind, DEFAULT_I_MAX, DEFAULT_ROGERS_C};
use ratecost::simloop::{Mode, DEFAULT_BURN_IN};
use ratecost::{LinearPlant, NoiseFamily, NoiseModel, SolvedPlant};
use serde::Deserialize;

/// Row-major matrix as nested arrays.
pub type MatrixSpec = Vec<Vec<f64>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub covariance: MatrixSpec,
    /// Orthonormal basis in which the coordinates are independent. Gaussian
    /// noise defaults to the covariance eigenbasis, other families to the
    /// identity (which then needs a diagonal covariance).
    #[serde(default)]
    pub basis: Option<MatrixSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    /// Omitted for a fully observed plant.
    #[serde(default)]
    pub c: Option<MatrixSpec>,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    pub noise_v: NoiseSpec,
    #[serde(default)]
    pub noise_w: Option<NoiseSpec>,
    /// Defaults to a standard Gaussian.
    #[serde(default)]
    pub noise_x1: Option<NoiseSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub svg: bool,
    /// Write each simulation's quantizer index stream next to its results.
    #[serde(default)]
    pub index_streams: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub plant: PlantSpec,
    /// Checked against the plant when given.
    #[serde(default)]
    pub mode: Option<Mode>,
    /// Wire names such as `thm1`; empty selects the defaults for the mode.
    #[serde(default)]
    pub bounds: Vec<String>,
    /// Absolute costs.
    #[serde(default)]
    pub b_grid: Option<Vec<f64>>,
    /// Costs relative to `b_min`.
    #[serde(default)]
    pub b_offsets: Option<Vec<f64>>,
    /// Distortions for `sweep`.
    #[serde(default)]
    pub d_grid: Option<Vec<f64>>,
    /// Distortion for `simulate` and `decompose`.
    #[serde(default)]
    pub distortion: Option<f64>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_i_max")]
    pub i_max: usize,
    #[serde(default = "default_rogers_c")]
    pub rogers_c: f64,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_horizon() -> usize {
    100_000
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_i_max() -> usize {
    DEFAULT_I_MAX
}

fn default_rogers_c() -> f64 {
    DEFAULT_ROGERS_C
}

fn matrix(name: &str, rows: &MatrixSpec) -> Result<DMatrix<f64>> {
    ensure!(!rows.is_empty(), "{name}: matrix has no rows");
    let cols = rows[0].len();
    ensure!(cols > 0, "{name}: matrix has no columns");
    for (i, row) in rows.iter().enumerate() {
        ensure!(row.len() == cols, "{name}: row {i} has {} entries, expected {cols}", row.len());
        ensure!(row.iter().all(|x| x.is_finite()), "{name}: row {i} has a non-finite entry");
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn noise(name: &str, spec: &NoiseSpec) -> Result<NoiseModel> {
    let cov = matrix(&format!("{name}.covariance"), &spec.covariance)?;
    let basis = spec
        .basis
        .as_ref()
        .map(|b| matrix(&format!("{name}.basis"), b))
        .transpose()?;
    NoiseModel::new(spec.family, cov, basis).with_context(|| format!("{name}: invalid noise model"))
}

fn check_increasing(name: &str, grid: &[f64]) -> Result<()> {
    ensure!(!grid.is_empty(), "{name} is empty");
    ensure!(grid.iter().all(|x| x.is_finite()), "{name} has a non-finite entry");
    if let Some(i) = grid.windows(2).position(|w| !(w[1] > w[0])) {
        bail!("{name} must be strictly increasing (entries {i} and {} are {} and {})", i + 1, grid[i], grid[i + 1]);
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).context("config does not match the schema")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Static checks that do not need the Riccati solutions.
    fn check(&self) -> Result<()> {
        if self.b_grid.is_some() && self.b_offsets.is_some() {
            bail!("give either b_grid or b_offsets, not both");
        }
        if let Some(g) = &self.b_grid {
            check_increasing("b_grid", g)?;
        }
        if let Some(g) = &self.b_offsets {
            check_increasing("b_offsets", g)?;
        }
        if let Some(g) = &self.d_grid {
            check_increasing("d_grid", g)?;
            ensure!(g[0] > 0.0, "d_grid entries must be positive");
        }
        if let Some(d) = self.distortion {
            ensure!(d > 0.0 && d.is_finite(), "distortion must be positive, got {d}");
        }
        let requests_bounds = self.b_grid.is_some() || self.b_offsets.is_some();
        let requests_sim = self.d_grid.is_some() || self.distortion.is_some();
        ensure!(
            requests_bounds || requests_sim,
            "config requests nothing: give b_grid/b_offsets, d_grid or distortion"
        );
        ensure!(self.horizon > self.burn_in, "horizon {} must exceed burn_in {}", self.horizon, self.burn_in);
        ensure!(!self.seeds.is_empty(), "seeds is empty");
        ensure!(self.i_max > 0, "i_max must be positive");
        ensure!(self.rogers_c > 0.0, "rogers_c must be positive");
        self.bound_kinds()?;
        Ok(())
    }

    /// Requested bound kinds, or `None` for the mode defaults.
    pub fn bound_kinds(&self) -> Result<Option<Vec<BoundKind>>> {
        if self.bounds.is_empty() {
            return Ok(None);
        }
        self.bounds
            .iter()
            .map(|s| BoundKind::from_name(s).with_context(|| format!("unknown bound kind {s:?}")))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn build_plant(&self) -> Result<LinearPlant> {
        let p = &self.plant;
        let a = matrix("a", &p.a)?;
        let n = a.nrows();
        let c = match &p.c {
            Some(c) => matrix("c", c)?,
            None => DMatrix::identity(n, n),
        };
        let noise_v = noise("noise_v", &p.noise_v)?;
        let noise_w = p.noise_w.as_ref().map(|w| noise("noise_w", w)).transpose()?;
        let noise_x1 = match &p.noise_x1 {
            Some(x) => noise("noise_x1", x)?,
            None => NoiseModel::gaussian(DMatrix::identity(n, n))?,
        };
        let plant = LinearPlant::new(
            a,
            matrix("b", &p.b)?,
            c,
            matrix("q", &p.q)?,
            matrix("r", &p.r)?,
            noise_v,
            noise_w,
            noise_x1,
        )
        .context("invalid plant")?;
        let mode = plant_mode(&plant);
        if let Some(want) = self.mode {
            ensure!(want == mode, "config mode {want:?} does not match the plant, which is {mode:?}");
        }
        Ok(plant)
    }

    pub fn solve(&self) -> Result<SolvedPlant> {
        SolvedPlant::solve(self.build_plant()?).context("Riccati solution failed")
    }

    /// Costs at which to evaluate bounds.
    pub fn b_values(&self, b_min: f64) -> Result<Vec<f64>> {
        match (&self.b_grid, &self.b_offsets) {
            (Some(g), _) => Ok(g.clone()),
            (_, Some(o)) => Ok(o.iter().map(|x| b_min + x).collect()),
            _ => bail!("config has no b_grid or b_offsets"),
        }
    }

    pub fn d_values(&self) -> Result<&[f64]> {
        match &self.d_grid {
            Some(g) => Ok(g),
            None => bail!("config has no d_grid"),
        }
    }

    /// Single distortion for `simulate`/`decompose`: `distortion`, else the first `d_grid` entry.
    pub fn single_distortion(&self) -> Result<f64> {
        self.distortion
            .or_else(|| self.d_grid.as_ref().map(|g| g[0]))
            .context("config has neither distortion nor d_grid")
    }
}

pub fn plant_mode(plant: &LinearPlant) -> Mode {
    if plant.is_fully_observed() {
        Mode::FullyObserved
    } else {
        Mode::PartiallyObserved
    }
}
