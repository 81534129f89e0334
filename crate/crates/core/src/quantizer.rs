//! Lattice quantizers, the DPCM innovation codec and entropy estimation of
//! the emitted index stream.

use std::collections::HashMap;
use std::io::{self, BufRead, Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::rho_an_star;
use crate::linalg;

/// Largest dimension the quantizer menu covers.
pub const MAX_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("no lattice configured for dimension {0} (supported: 1..=8)")]
    UnsupportedDimension(usize),
    #[error("distortion must be positive, got {0}")]
    NonPositiveDistortion(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("weight matrix must be symmetric positive definite")]
    BadWeight,
    #[error("unknown index {0:?}")]
    UnknownIndex(Vec<i64>),
    #[error("stream too short: {len} samples with burn-in {burn_in} (need more than burn-in + 1000)")]
    TooShort { len: usize, burn_in: usize },
    #[error("malformed index stream: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeFamily {
    IntegerZ,
    AnStar,
}

/// A scaled lattice in `R^n`.
///
/// `A_n*` lives in the sum-zero hyperplane of `R^{n+1}`; it is carried to
/// `R^n` by a fixed orthonormal basis of that hyperplane.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    family: LatticeFamily,
    n: usize,
    scale: f64,
    /// Unscaled generator rows in the ambient coordinates (`R^n` for `Z^n`, `R^{n+1}` for `A_n*`).
    gen_ambient: DMatrix<f64>,
    /// Right inverse of `gen_ambient` mapping ambient points to coordinates.
    gen_pinv: DMatrix<f64>,
    /// Orthonormal `(n+1) x n` embedding (identity for `Z^n`).
    embed: DMatrix<f64>,
    /// Unscaled covering radius.
    base_radius: f64,
}

impl Lattice {
    /// `Z^n` with unit spacing.
    pub fn integer(n: usize) -> Self {
        let g = DMatrix::identity(n, n);
        Self {
            family: LatticeFamily::IntegerZ,
            n,
            scale: 1.0,
            gen_pinv: g.clone(),
            embed: g.clone(),
            gen_ambient: g,
            base_radius: (n as f64).sqrt() / 2.0,
        }
    }

    /// `A_n*` with generator rows `(1,-1,0,..)`, `(1,0,-1,..)`, ..., and the
    /// glue vector `(-n/(n+1), 1/(n+1), ..., 1/(n+1))` in `R^{n+1}`.
    pub fn a_n_star(n: usize) -> Self {
        assert!(n >= 1, "A_n* needs n >= 1");
        let nf = n as f64;
        let mut g = DMatrix::zeros(n, n + 1);
        for r in 0..n - 1 {
            g[(r, 0)] = 1.0;
            g[(r, r + 1)] = -1.0;
        }
        g[(n - 1, 0)] = -nf / (nf + 1.0);
        for c in 1..=n {
            g[(n - 1, c)] = 1.0 / (nf + 1.0);
        }
        let gen_pinv = linalg::pinv(&g);
        let mut embed = DMatrix::zeros(n + 1, n);
        for k in 0..n {
            let norm = (((k + 1) * (k + 2)) as f64).sqrt();
            for r in 0..=k {
                embed[(r, k)] = 1.0 / norm;
            }
            embed[(k + 1, k)] = -((k + 1) as f64) / norm;
        }
        Self {
            family: LatticeFamily::AnStar,
            n,
            scale: 1.0,
            gen_ambient: g,
            gen_pinv,
            embed,
            base_radius: (nf * (nf + 2.0) / (12.0 * (nf + 1.0))).sqrt(),
        }
    }

    /// The configured lattice for dimension `n`: `Z` for `n = 1`, `A_n*` up to 8.
    pub fn for_dimension(n: usize) -> Result<Self, QuantizerError> {
        match n {
            1 => Ok(Self::integer(1)),
            2..=MAX_DIM => Ok(Self::a_n_star(n)),
            _ => Err(QuantizerError::UnsupportedDimension(n)),
        }
    }

    /// Rescales so that `covering_radius^2 = d`.
    pub fn scale_to_distortion(&self, d: f64) -> Result<Self, QuantizerError> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(QuantizerError::NonPositiveDistortion(d));
        }
        Ok(self.scaled(d.sqrt() / self.base_radius))
    }

    /// Same lattice with absolute scale `t` (relative to the unit generator).
    pub fn scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.scale = t;
        out
    }

    pub fn family(&self) -> LatticeFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn covering_radius(&self) -> f64 {
        self.base_radius * self.scale
    }

    /// Volume of a Voronoi cell.
    pub fn cell_volume(&self) -> f64 {
        let g = self.generator();
        linalg::log_abs_det(&g).exp()
    }

    /// Covering efficiency `(vol B(r_cov) / vol cell)^{1/n}`.
    pub fn rho(&self) -> f64 {
        match self.family {
            LatticeFamily::AnStar => rho_an_star(self.n),
            LatticeFamily::IntegerZ => {
                let nf = self.n as f64;
                let log_ball = nf / 2.0 * std::f64::consts::PI.ln() - statrs::function::gamma::ln_gamma(nf / 2.0 + 1.0);
                self.base_radius * (log_ball / nf).exp()
            }
        }
    }

    /// Scaled generator rows in `R^n`.
    pub fn generator(&self) -> DMatrix<f64> {
        &self.gen_ambient * &self.embed * self.scale
    }

    /// Lattice point with the given integer coordinates.
    pub fn point(&self, coords: &[i64]) -> Result<Vec<f64>, QuantizerError> {
        if coords.len() != self.n {
            return Err(QuantizerError::UnknownIndex(coords.to_vec()));
        }
        let mut out = vec![0.0; self.n];
        self.point_into(coords, &mut out);
        Ok(out)
    }

    fn point_into(&self, coords: &[i64], out: &mut [f64]) {
        let amb = self.gen_ambient.ncols();
        let mut p = vec![0.0; amb];
        for (r, &c) in coords.iter().enumerate() {
            if c != 0 {
                for k in 0..amb {
                    p[k] += c as f64 * self.gen_ambient[(r, k)];
                }
            }
        }
        self.from_ambient(&p, out);
    }

    fn to_ambient(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.embed.nrows()];
        linalg::gemv_into(&mut y, &self.embed, x);
        y.iter_mut().for_each(|v| *v /= self.scale);
        y
    }

    fn from_ambient(&self, p: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let col = self.embed.column(j);
            *o = self.scale * p.iter().zip(col.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn coords_of(&self, p: &[f64]) -> Vec<i64> {
        (0..self.n)
            .map(|j| {
                let v: f64 = p.iter().enumerate().map(|(k, &pk)| pk * self.gen_pinv[(k, j)]).sum();
                v.round() as i64
            })
            .collect()
    }

    /// Nearest lattice point to `x`, as integer coordinates in the generator
    /// basis. Exact ties go to the candidate with even coordinate sum, then
    /// to the lexicographically smaller coordinates.
    pub fn nearest(&self, x: &[f64]) -> Vec<i64> {
        assert_eq!(x.len(), self.n, "nearest: dimension mismatch");
        match self.family {
            LatticeFamily::IntegerZ => x.iter().map(|&v| round_half_even(v / self.scale)).collect(),
            LatticeFamily::AnStar => self.nearest_an_star(x),
        }
    }

    fn nearest_an_star(&self, x: &[f64]) -> Vec<i64> {
        let y = self.to_ambient(x);
        let n1 = self.n + 1;
        let mut best: Option<(f64, Vec<i64>)> = None;
        let mut t = vec![0.0; n1];
        let mut r = vec![0.0; n1];
        let mut order: Vec<usize> = (0..n1).collect();
        for i in 0..n1 {
            let j = n1 - i;
            let glue = |k: usize| {
                if k < j {
                    i as f64 / n1 as f64
                } else {
                    -(j as f64) / n1 as f64
                }
            };
            for k in 0..n1 {
                t[k] = y[k] - glue(k);
                r[k] = t[k].round_ties_even();
            }
            let delta: i64 = r.iter().map(|&v| v as i64).sum();
            if delta != 0 {
                // Move the coordinates whose rounding cost least to undo.
                order.sort_by(|&a, &b| (r[b] - t[b]).total_cmp(&(r[a] - t[a])));
                if delta > 0 {
                    for &k in order.iter().take(delta as usize) {
                        r[k] -= 1.0;
                    }
                } else {
                    for &k in order.iter().rev().take((-delta) as usize) {
                        r[k] += 1.0;
                    }
                }
            }
            let p: Vec<f64> = (0..n1).map(|k| r[k] + glue(k)).collect();
            let dist: f64 = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            let coords = self.coords_of(&p);
            best = Some(match best {
                None => (dist, coords),
                Some((bd, bc)) => {
                    if prefer(dist, &coords, bd, &bc) {
                        (dist, coords)
                    } else {
                        (bd, bc)
                    }
                }
            });
        }
        best.expect("at least one coset").1
    }

    /// Quantizes `x`, writing the reconstruction into `out`, returning the index.
    pub fn quantize_into(&self, x: &[f64], out: &mut [f64]) -> Vec<i64> {
        let c = self.nearest(x);
        self.point_into(&c, out);
        c
    }
}

fn round_half_even(v: f64) -> i64 {
    v.round_ties_even() as i64
}

fn prefer(d_new: f64, c_new: &[i64], d_old: f64, c_old: &[i64]) -> bool {
    let tol = 1e-12 * (1.0 + d_old.max(d_new));
    if d_new < d_old - tol {
        return true;
    }
    if d_new > d_old + tol {
        return false;
    }
    let even_new = c_new.iter().sum::<i64>().rem_euclid(2) == 0;
    let even_old = c_old.iter().sum::<i64>().rem_euclid(2) == 0;
    if even_new != even_old {
        return even_new;
    }
    c_new < c_old
}

/// Shared, immutable configuration of the DPCM codec.
#[derive(Debug, Clone)]
pub struct DpcmCodec {
    a: DMatrix<f64>,
    b: Option<DMatrix<f64>>,
    w_sqrt: DMatrix<f64>,
    w_inv_sqrt: DMatrix<f64>,
    lattice: Lattice,
}

impl DpcmCodec {
    /// `weight` is the distortion weight `W`; the lattice must already be
    /// scaled to the target distortion.
    pub fn new(a: DMatrix<f64>, b: Option<DMatrix<f64>>, weight: &DMatrix<f64>, lattice: Lattice) -> Result<Self, QuantizerError> {
        let n = a.nrows();
        if a.ncols() != n || weight.shape() != (n, n) || lattice.dim() != n {
            return Err(QuantizerError::Dimension {
                expected: n,
                got: lattice.dim(),
            });
        }
        if let Some(b) = &b {
            if b.nrows() != n {
                return Err(QuantizerError::Dimension { expected: n, got: b.nrows() });
            }
        }
        if !linalg::is_symmetric(weight) {
            return Err(QuantizerError::BadWeight);
        }
        let w_inv_sqrt = linalg::sym_inv_sqrt(weight).ok_or(QuantizerError::BadWeight)?;
        Ok(Self {
            w_sqrt: linalg::sym_sqrt(weight),
            w_inv_sqrt,
            a,
            b,
            lattice,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Squared covering radius, the per-step weighted distortion guarantee.
    pub fn distortion(&self) -> f64 {
        self.lattice.covering_radius().powi(2)
    }
}

/// Output of one encoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub index: Vec<i64>,
    /// Weighted innovation `W^{1/2} (s - prediction)`.
    pub weighted_innovation: Vec<f64>,
    /// `(s - ŝ)^T W (s - ŝ)` after the update.
    pub weighted_error: f64,
}

/// Estimate `ŝ` held identically by encoder and decoder.
#[derive(Debug, Clone)]
pub struct DpcmState {
    s_hat: Vec<f64>,
    step: u64,
    hasher: Sha256,
    pred: Vec<f64>,
    tmp: Vec<f64>,
    point: Vec<f64>,
}

impl DpcmState {
    pub fn new(s_hat0: Vec<f64>) -> Self {
        let n = s_hat0.len();
        Self {
            s_hat: s_hat0,
            step: 0,
            hasher: Sha256::new(),
            pred: vec![0.0; n],
            tmp: vec![0.0; n],
            point: vec![0.0; n],
        }
    }

    pub fn s_hat(&self) -> &[f64] {
        &self.s_hat
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// SHA-256 over the bit patterns of every `ŝ` so far.
    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    fn predict(&mut self, codec: &DpcmCodec, u_prev: Option<&[f64]>) {
        linalg::gemv_into(&mut self.pred, &codec.a, &self.s_hat);
        if let (Some(b), Some(u)) = (&codec.b, u_prev) {
            linalg::gemv_into(&mut self.tmp, b, u);
            for (p, t) in self.pred.iter_mut().zip(&self.tmp) {
                *p += t;
            }
        }
    }

    fn reconstruct(&mut self, codec: &DpcmCodec) {
        linalg::gemv_into(&mut self.tmp, &codec.w_inv_sqrt, &self.point);
        for ((s, p), t) in self.s_hat.iter_mut().zip(&self.pred).zip(&self.tmp) {
            *s = p + t;
        }
        self.step += 1;
        self.hasher.update(self.step.to_le_bytes());
        for v in &self.s_hat {
            self.hasher.update(v.to_bits().to_le_bytes());
        }
    }

    /// Quantizes the innovation `s - (A ŝ + B u)` and advances `ŝ`.
    pub fn encode(&mut self, codec: &DpcmCodec, s: &[f64], u_prev: Option<&[f64]>) -> Encoded {
        self.predict(codec, u_prev);
        for ((t, si), p) in self.tmp.iter_mut().zip(s).zip(&self.pred) {
            *t = si - p;
        }
        let mut z = vec![0.0; s.len()];
        linalg::gemv_into(&mut z, &codec.w_sqrt, &self.tmp);
        let mut pt = std::mem::take(&mut self.point);
        let index = codec.lattice.quantize_into(&z, &mut pt);
        let weighted_error = z.iter().zip(&pt).map(|(a, b)| (a - b) * (a - b)).sum();
        self.point = pt;
        self.reconstruct(codec);
        Encoded {
            index,
            weighted_innovation: z,
            weighted_error,
        }
    }

    /// Mirror of [`encode`](Self::encode) driven by the index alone.
    pub fn decode(&mut self, codec: &DpcmCodec, index: &[i64], u_prev: Option<&[f64]>) -> Result<&[f64], QuantizerError> {
        if index.len() != codec.dim() {
            return Err(QuantizerError::UnknownIndex(index.to_vec()));
        }
        self.predict(codec, u_prev);
        let mut pt = std::mem::take(&mut self.point);
        codec.lattice.point_into(index, &mut pt);
        self.point = pt;
        self.reconstruct(codec);
        Ok(&self.s_hat)
    }
}

/// Sequence of emitted indices, stored flat.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexStream {
    dim: usize,
    data: Vec<i64>,
}

const BINARY_MAGIC: &[u8; 4] = b"RCIX";

impl IndexStream {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * steps),
        }
    }

    pub fn push(&mut self, index: &[i64]) {
        assert_eq!(index.len(), self.dim, "index dimension");
        self.data.extend_from_slice(index);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, step: usize) -> &[i64] {
        &self.data[step * self.dim..(step + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Counts per index over steps `from..`.
    pub fn histogram(&self, from: usize) -> HashMap<Vec<i64>, u64> {
        let mut h: HashMap<Vec<i64>, u64> = HashMap::new();
        for idx in self.iter().skip(from) {
            match h.get_mut(idx) {
                Some(c) => *c += 1,
                None => {
                    h.insert(idx.to_vec(), 1);
                }
            }
        }
        h
    }

    /// `step,c0,c1,...` with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = (0..self.dim).map(|j| format!("c{j}")).collect();
        writeln!(w, "step,{}", header.join(","))?;
        for (i, idx) in self.iter().enumerate() {
            write!(w, "{i}")?;
            for c in idx {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, QuantizerError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| QuantizerError::Malformed("empty input".into()))??;
        let dim = header.split(',').count().saturating_sub(1);
        let mut out = Self::new(dim);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 || fields[0].parse::<usize>().ok() != Some(i) {
                return Err(QuantizerError::Malformed(format!("bad row {i}: {line}")));
            }
            for f in &fields[1..] {
                out.data.push(f.parse().map_err(|_| QuantizerError::Malformed(format!("bad integer {f:?}")))?);
            }
        }
        Ok(out)
    }

    /// `RCIX`, `u32` dimension, `u64` length, then `i64` coordinates, all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for c in &self.data {
            w.write_all(&c.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, QuantizerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(QuantizerError::Malformed("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut out = Self::with_capacity(dim, len);
        for _ in 0..dim * len {
            r.read_exact(&mut b8)?;
            out.data.push(i64::from_le_bytes(b8));
        }
        Ok(out)
    }
}

/// Entropy of the marginal index distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyEstimate {
    pub plug_in_nats: f64,
    /// Plug-in plus `(support - 1) / (2 samples)`.
    pub miller_madow_nats: f64,
    /// Standard error of the plug-in estimate under i.i.d. sampling.
    pub std_error: f64,
    pub support: usize,
    pub samples: usize,
}

/// Plug-in entropy of a histogram.
pub fn entropy_from_counts<I: IntoIterator<Item = u64>>(counts: I) -> EntropyEstimate {
    let mut counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    // Fixed summation order, so the estimate does not depend on hash iteration order.
    counts.sort_unstable();
    let total: u64 = counts.iter().sum();
    let nf = total as f64;
    let (mut h, mut h2) = (0.0, 0.0);
    for &c in &counts {
        let p = c as f64 / nf;
        let l = p.ln();
        h -= p * l;
        h2 += p * l * l;
    }
    let support = counts.len();
    EntropyEstimate {
        plug_in_nats: h,
        miller_madow_nats: h + (support.saturating_sub(1)) as f64 / (2.0 * nf),
        std_error: ((h2 - h * h).max(0.0) / nf).sqrt(),
        support,
        samples: total as usize,
    }
}

/// Plug-in entropy over steps `burn_in..` of the stream.
pub fn empirical_entropy(stream: &IndexStream, burn_in: usize) -> Result<EntropyEstimate, QuantizerError> {
    if stream.len() <= burn_in + 1000 {
        return Err(QuantizerError::TooShort {
            len: stream.len(),
            burn_in,
        });
    }
    Ok(entropy_from_counts(stream.histogram(burn_in).into_values()))
}
