//! Small dense helpers shared by the covariance estimators.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Two-sided 97.5% standard normal quantile used for Wald intervals.
pub const Z_975: f64 = 1.959963984540054;

fn std_normal() -> Normal {
    Normal::standard()
}

pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn norm_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            m[(r, c)] = v;
            m[(c, r)] = v;
        }
    }
}

/// Inverse of a symmetric matrix. Falls back to a ridge of `1e-8·trace/dim`
/// when the Cholesky factorization fails; the flag reports the fallback.
pub fn robust_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = m.clone().cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return (inv, false);
        }
    }
    let d = m.nrows().max(1);
    let ridge = (1e-8 * m.trace().abs() / d as f64).max(f64::MIN_POSITIVE);
    let mut reg = m.clone();
    for i in 0..m.nrows() {
        reg[(i, i)] += ridge;
    }
    let inv = reg
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| reg.clone().try_inverse())
        .unwrap_or_else(|| reg.pseudo_inverse(1e-12).unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols())));
    (inv, true)
}

/// Replace negative eigenvalues by zero. Returns whether anything was clipped
/// beyond rounding noise (`1e-8·trace`).
pub fn clip_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return (sym, false);
    }
    let trace = eig.eigenvalues.iter().map(|v| v.abs()).sum::<f64>();
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    (out, min < -1e-8 * trace)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Accumulate `w·a·bᵀ` into `m`.
#[inline]
pub fn add_outer(m: &mut DMatrix<f64>, w: f64, a: &[f64], b: &[f64]) {
    for (r, ar) in a.iter().enumerate() {
        let wa = w * ar;
        if wa == 0.0 {
            continue;
        }
        for (c, bc) in b.iter().enumerate() {
            m[(r, c)] += wa * bc;
        }
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |r, c| rows[r][c])
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
