//! Small dense linear-algebra helpers shared by the solvers and the simulator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative singular-value threshold used for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-9;

/// Absolute slack allowed on negative eigenvalues in PSD checks, scaled by
/// `max(1, largest |eigenvalue|)`.
pub const PSD_TOL: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_square(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols()
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if !is_square(m) {
        return false;
    }
    let ev = sym_eigenvalues(m);
    let scale = ev.iter().fold(1.0_f64, |acc, e| acc.max(e.abs()));
    ev.iter().all(|&e| e >= -PSD_TOL * scale)
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !is_square(m) {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-9 * scale
}

/// Number of singular values above `RANK_TOL * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0_f64, |a, &s| a.max(s));
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// Symmetric (spectral) square root of a PSD matrix. Tiny negative
/// eigenvalues from round-off are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&e| e.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Inverse symmetric square root; `None` when `m` is not positive definite.
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
        return None;
    }
    let d = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&e| 1.0 / e.sqrt()));
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Moore-Penrose pseudoinverse via SVD with the rank tolerance above.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, &s| a.max(s));
    let eps = (RANK_TOL * smax).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(eps).expect("svd computed with u and v")
}

/// log |det m| computed through LU, `-inf` for singular input.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].abs();
        if d == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += d.ln();
    }
    acc
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Orthonormal basis of the orthogonal complement of the columns of `q`
/// (which are assumed orthonormal), returned as columns.
pub fn orthogonal_complement(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let k = q.ncols();
    let proj = DMatrix::<f64>::identity(n, n) - q * q.transpose();
    let eig = SymmetricEigen::new(symmetrize(&proj));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let cols: Vec<DVector<f64>> = idx.iter().take(n - k).map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Matrix-vector product into a preallocated buffer.
#[inline]
pub fn gemv_into(out: &mut [f64], m: &DMatrix<f64>, x: &[f64]) {
    let (rows, cols) = m.shape();
    debug_assert_eq!(out.len(), rows);
    debug_assert_eq!(x.len(), cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..cols {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        let col = m.column(j);
        for i in 0..rows {
            out[i] += col[i] * xj;
        }
    }
}

/// Quadratic form `x^T m x`.
#[inline]
pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let col = m.column(j);
        let mut s = 0.0;
        for i in 0..n {
            s += x[i] * col[i];
        }
        acc += s * x[j];
    }
    acc
}
