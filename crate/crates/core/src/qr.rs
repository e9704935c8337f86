//! Linear quantile regression.
//!
//! `min_b n⁻¹ Σ ρ_τ(y_i − x_iᵀb)` is solved in two phases. A primal-dual
//! interior point method with Mehrotra correction works on the bounded dual
//! `max yᵀa s.t. Xᵀa = (1−τ)Xᵀ1, 0 ≤ a ≤ 1` and gets close to the optimum.
//! The rows with the smallest residuals then seed a basic solution, and
//! simplex-style edge descent moves between basic solutions until the
//! subgradient certificate holds. The returned coefficients are therefore
//! always an exact basic solution.

use nalgebra::{DMatrix, DVector};

use crate::error::{MkqrError, Result};
use crate::model::{check_loss, psi, QuantileLevel};

const IPM_MAX_ITER: usize = 100;
const PIVOT_CAP: usize = 200;
const CERT_TOL: f64 = 1e-9;

/// A dense linear quantile regression problem. The design is row-major `n × d`.
#[derive(Debug, Clone)]
pub struct LinearQrProblem {
    design: Vec<f64>,
    y: Vec<f64>,
    d: usize,
    tau: QuantileLevel,
}

impl LinearQrProblem {
    pub fn new(design: Vec<f64>, d: usize, y: Vec<f64>, tau: QuantileLevel) -> Result<Self> {
        let n = y.len();
        if d == 0 {
            return Err(MkqrError::Validation("design must have at least one column".into()));
        }
        if design.len() != n * d {
            return Err(MkqrError::DimensionMismatch {
                expected: n * d,
                found: design.len(),
                context: "design entries vs n·d",
            });
        }
        if n < d {
            return Err(MkqrError::Validation(format!(
                "need at least as many observations as columns ({n} < {d})"
            )));
        }
        if design.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(MkqrError::Validation("non-finite entry in design or response".into()));
        }
        Ok(Self { design, y, d, tau })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn tau(&self) -> QuantileLevel {
        self.tau
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.d..(i + 1) * self.d]
    }

    /// Mean check loss at `coef`.
    pub fn objective(&self, coef: &[f64]) -> f64 {
        let n = self.n();
        (0..n).map(|i| check_loss(self.y[i] - dot(self.row(i), coef), self.tau)).sum::<f64>() / n as f64
    }

    pub fn residuals(&self, coef: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.y[i] - dot(self.row(i), coef)).collect()
    }

    /// Fitted values `x_iᵀ coef`.
    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| dot(self.row(i), coef)).collect()
    }

    /// Fails with the first column lying in the span of the preceding ones.
    pub fn check_rank(&self) -> Result<()> {
        let n = self.n();
        let d = self.d;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        for j in 0..d {
            let mut col: Vec<f64> = (0..n).map(|i| self.design[i * d + j]).collect();
            let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm0 == 0.0 {
                return Err(MkqrError::SingularDesign { column: j });
            }
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &col);
                    col.iter_mut().zip(q).for_each(|(v, qv)| *v -= c * qv);
                }
            }
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-10 * norm0 {
                return Err(MkqrError::SingularDesign { column: j });
            }
            col.iter_mut().for_each(|v| *v /= norm);
            basis.push(col);
        }
        Ok(())
    }
}

/// Result of a linear quantile regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct QrSolution {
    pub coef: Vec<f64>,
    pub objective: f64,
    /// Interior point iterations plus simplex pivots.
    pub iterations: usize,
    pub converged: bool,
    /// Rows interpolated by the basic solution.
    pub basis: Vec<usize>,
    /// Largest violation of the subgradient bounds at the returned point.
    pub certificate_slack: f64,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize mean check loss for a fixed design.
pub fn solve_linear_qr(problem: &LinearQrProblem) -> Result<QrSolution> {
    problem.check_rank()?;
    let (b0, ipm_iters) = if problem.n() == problem.d() {
        (interpolate_all(problem)?, 0)
    } else {
        interior_point(problem)
    };
    let basis = basis_from_residuals(problem, &problem.residuals(&b0))?;
    finish_from_basis(problem, basis, ipm_iters)
}

/// Same as [`solve_linear_qr`] but starts the simplex phase from `hint` when
/// those rows form a nonsingular basis; falls back to the full solve.
pub fn solve_linear_qr_warm(problem: &LinearQrProblem, hint: &[usize]) -> Result<QrSolution> {
    if hint.len() == problem.d() && hint.iter().all(|&i| i < problem.n()) && basis_matrix(problem, hint).lu().is_invertible() {
        let sol = finish_from_basis(problem, hint.to_vec(), 0)?;
        if sol.converged {
            return Ok(sol);
        }
    }
    solve_linear_qr(problem)
}

fn interpolate_all(problem: &LinearQrProblem) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..problem.n()).collect();
    solve_basis(problem, &idx).ok_or_else(|| MkqrError::Numerical("square design is singular".into()))
}

fn basis_matrix(problem: &LinearQrProblem, basis: &[usize]) -> DMatrix<f64> {
    let d = problem.d();
    DMatrix::from_fn(d, d, |r, c| problem.row(basis[r])[c])
}

fn solve_basis(problem: &LinearQrProblem, basis: &[usize]) -> Option<Vec<f64>> {
    let xb = basis_matrix(problem, basis);
    let yb = DVector::from_iterator(basis.len(), basis.iter().map(|&i| problem.y[i]));
    xb.lu().solve(&yb).map(|v| v.iter().copied().collect())
}

/// Primal-dual interior point on the bounded dual. Returns the primal
/// coefficients and the iteration count.
fn interior_point(problem: &LinearQrProblem) -> (Vec<f64>, usize) {
    let n = problem.n();
    let d = problem.d();
    let tau = problem.tau.value();
    let y = &problem.y;

    let mut a = vec![1.0 - tau; n];
    let mut s = vec![tau; n];
    let mut c = vec![0.0; d];
    for i in 0..n {
        for (cj, xj) in c.iter_mut().zip(problem.row(i)) {
            *cj += (1.0 - tau) * xj;
        }
    }

    // least-squares start
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for i in 0..n {
        let row = problem.row(i);
        for r in 0..d {
            xty[r] += row[r] * y[i];
            for cc in 0..=r {
                xtx[(r, cc)] += row[r] * row[cc];
            }
        }
    }
    symmetrize_lower(&mut xtx);
    let mut b: Vec<f64> = xtx
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&xty).iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; d]);

    let r0 = problem.residuals(&b);
    let scale = r0.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let offset = (0.1 * scale).max(1e-8);
    let mut z: Vec<f64> = r0.iter().map(|&r| (-r).max(0.0) + offset).collect();
    let mut w: Vec<f64> = r0.iter().map(|&r| r.max(0.0) + offset).collect();

    let y_scale = 1.0 + y.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let gap_tol = 1e-11 * n as f64 * y_scale;

    let mut q = vec![0.0; n];
    let mut rhat = vec![0.0; n];
    let mut da = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];
    let mut xdb = vec![0.0; n];

    let mut iter = 0;
    while iter < IPM_MAX_ITER {
        let gap: f64 = (0..n).map(|i| a[i] * z[i] + s[i] * w[i]).sum();
        if !gap.is_finite() || gap < gap_tol {
            break;
        }
        iter += 1;

        // residuals of the linear constraints
        let mut rp = c.clone();
        for i in 0..n {
            for (rj, xj) in rp.iter_mut().zip(problem.row(i)) {
                *rj -= a[i] * xj;
            }
        }
        let rd: Vec<f64> = (0..n).map(|i| y[i] - dot(problem.row(i), &b) + z[i] - w[i]).collect();

        for i in 0..n {
            q[i] = 1.0 / (z[i] / a[i] + w[i] / s[i]);
        }
        let mut m = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let row = problem.row(i);
            for r in 0..d {
                let qr = q[i] * row[r];
                for cc in 0..=r {
                    m[(r, cc)] += qr * row[cc];
                }
            }
        }
        symmetrize_lower(&mut m);
        let chol = match m.clone().cholesky() {
            Some(ch) => ch,
            None => {
                let ridge = 1e-12 * m.trace().max(1e-300);
                for r in 0..d {
                    m[(r, r)] += ridge;
                }
                match m.cholesky() {
                    Some(ch) => ch,
                    None => break,
                }
            }
        };

        let solve_direction = |rhat: &[f64], q: &[f64], xdb: &mut [f64], da: &mut [f64]| -> Vec<f64> {
            let mut rhs = DVector::<f64>::zeros(d);
            for i in 0..n {
                let qi = q[i] * rhat[i];
                for (r, xj) in problem.row(i).iter().enumerate() {
                    rhs[r] += qi * xj;
                }
            }
            for r in 0..d {
                rhs[r] -= rp[r];
            }
            let db: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
            for i in 0..n {
                xdb[i] = dot(problem.row(i), &db);
                da[i] = q[i] * (rhat[i] - xdb[i]);
            }
            db
        };

        // predictor
        for i in 0..n {
            rhat[i] = rd[i] - z[i] + w[i];
        }
        let _ = solve_direction(&rhat, &q, &mut xdb, &mut da);
        for i in 0..n {
            dz[i] = -z[i] - z[i] / a[i] * da[i];
            dw[i] = -w[i] + w[i] / s[i] * da[i];
        }
        let (ap, ad) = step_lengths(&a, &s, &z, &w, &da, &dz, &dw, 1.0);
        let mu_aff: f64 = (0..n)
            .map(|i| (a[i] + ap * da[i]) * (z[i] + ad * dz[i]) + (s[i] - ap * da[i]) * (w[i] + ad * dw[i]))
            .sum();
        let sigma = (mu_aff / gap).clamp(0.0, 1.0).powi(3);
        let mu = sigma * gap / (2 * n) as f64;

        // corrector
        let da_aff = da.clone();
        let dz_aff = dz.clone();
        let dw_aff = dw.clone();
        for i in 0..n {
            rhat[i] = rd[i] + (mu - a[i] * z[i] - da_aff[i] * dz_aff[i]) / a[i]
                - (mu - s[i] * w[i] + da_aff[i] * dw_aff[i]) / s[i];
        }
        let db = solve_direction(&rhat, &q, &mut xdb, &mut da);
        for i in 0..n {
            dz[i] = (mu - a[i] * z[i] - da_aff[i] * dz_aff[i] - z[i] * da[i]) / a[i];
            dw[i] = (mu - s[i] * w[i] + da_aff[i] * dw_aff[i] + w[i] * da[i]) / s[i];
        }
        let (ap, ad) = step_lengths(&a, &s, &z, &w, &da, &dz, &dw, 0.99995);
        for i in 0..n {
            a[i] += ap * da[i];
            s[i] -= ap * da[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        for (bj, dbj) in b.iter_mut().zip(&db) {
            *bj += ad * dbj;
        }
    }
    (b, iter)
}

#[allow(clippy::too_many_arguments)]
fn step_lengths(a: &[f64], s: &[f64], z: &[f64], w: &[f64], da: &[f64], dz: &[f64], dw: &[f64], frac: f64) -> (f64, f64) {
    let mut ap: f64 = 1.0 / frac;
    let mut ad: f64 = 1.0 / frac;
    for i in 0..a.len() {
        if da[i] < 0.0 {
            ap = ap.min(-a[i] / da[i]);
        }
        if da[i] > 0.0 {
            ap = ap.min(s[i] / da[i]);
        }
        if dz[i] < 0.0 {
            ad = ad.min(-z[i] / dz[i]);
        }
        if dw[i] < 0.0 {
            ad = ad.min(-w[i] / dw[i]);
        }
    }
    ((frac * ap).min(1.0), (frac * ad).min(1.0))
}

fn symmetrize_lower(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for r in 0..d {
        for c in (r + 1)..d {
            m[(r, c)] = m[(c, r)];
        }
    }
}

/// Greedily pick `d` linearly independent rows in order of increasing |residual|.
fn basis_from_residuals(problem: &LinearQrProblem, resid: &[f64]) -> Result<Vec<usize>> {
    let d = problem.d();
    let mut order: Vec<usize> = (0..problem.n()).collect();
    order.sort_by(|&i, &j| resid[i].abs().total_cmp(&resid[j].abs()).then(i.cmp(&j)));
    let mut chosen = Vec::with_capacity(d);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(d);
    for &i in &order {
        let row = problem.row(i);
        let norm0 = dot(row, row).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _ in 0..2 {
            for qv in &ortho {
                let c = dot(qv, &v);
                v.iter_mut().zip(qv).for_each(|(a, b)| *a -= c * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            ortho.push(v);
            chosen.push(i);
            if chosen.len() == d {
                return Ok(chosen);
            }
        }
    }
    Err(MkqrError::Numerical("could not find a nonsingular basis".into()))
}

/// Edge descent between basic solutions starting at `basis`.
fn finish_from_basis(problem: &LinearQrProblem, mut basis: Vec<usize>, ipm_iters: usize) -> Result<QrSolution> {
    let n = problem.n();
    let d = problem.d();
    let tau = problem.tau;
    let t = tau.value();
    let y = &problem.y;

    let mut in_basis = vec![false; n];
    basis.iter().for_each(|&i| in_basis[i] = true);
    let mut coef = solve_basis(problem, &basis)
        .ok_or_else(|| MkqrError::Numerical("initial basis is singular".into()))?;
    let mut pivots = 0;
    let mut slack;
    let mut cvec = vec![0.0; n];
    let mut breaks: Vec<(f64, f64, usize)> = Vec::with_capacity(n);

    loop {
        let mut resid = problem.residuals(&coef);
        for &i in &basis {
            resid[i] = 0.0;
        }
        let mut g = vec![0.0; d];
        for i in 0..n {
            if !in_basis[i] {
                let ps = psi(resid[i], tau);
                for (gj, xj) in g.iter_mut().zip(problem.row(i)) {
                    *gj += ps * xj;
                }
            }
        }
        let xb = basis_matrix(problem, &basis);
        let lu = xb.clone().lu();
        let lu_t = xb.transpose().lu();
        let rhs = DVector::from_iterator(d, g.iter().map(|v| -v));
        let dual = match lu_t.solve(&rhs) {
            Some(v) => v,
            None => return Err(MkqrError::Numerical("basis became singular".into())),
        };

        // candidate edges, steepest first
        let mut cands: Vec<(f64, usize, f64)> = Vec::new();
        slack = 0.0f64;
        for k in 0..d {
            let ak = dual[k];
            if ak > t + CERT_TOL {
                cands.push((t - ak, k, 1.0));
                slack = slack.max(ak - t);
            } else if ak < t - 1.0 - CERT_TOL {
                cands.push((ak + 1.0 - t, k, -1.0));
                slack = slack.max(t - 1.0 - ak);
            }
        }
        if cands.is_empty() || pivots >= PIVOT_CAP {
            break;
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut moved = false;
        for &(_, k, sigma) in &cands {
            let mut e = DVector::<f64>::zeros(d);
            e[k] = -sigma;
            let delta: Vec<f64> = match lu.solve(&e) {
                Some(v) => v.iter().copied().collect(),
                None => continue,
            };
            let mut slope = if sigma > 0.0 { t } else { 1.0 - t };
            breaks.clear();
            for i in 0..n {
                if in_basis[i] {
                    continue;
                }
                let ci = dot(problem.row(i), &delta);
                cvec[i] = ci;
                let ri = resid[i];
                if ci == 0.0 {
                    continue;
                }
                if ri > 0.0 {
                    slope -= t * ci;
                } else if ri < 0.0 {
                    slope += (1.0 - t) * ci;
                } else {
                    slope += if ci > 0.0 { (1.0 - t) * ci } else { -t * ci };
                }
                if ri != 0.0 {
                    let lam = ri / ci;
                    if lam > 0.0 {
                        breaks.push((lam, ci.abs(), i));
                    }
                }
            }
            if slope >= -1e-12 {
                continue;
            }
            breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            let mut entering = None;
            for &(lam, inc, i) in &breaks {
                slope += inc;
                if slope >= 0.0 {
                    entering = Some((lam, i));
                    break;
                }
            }
            let Some((lam, i_new)) = entering else {
                return Err(MkqrError::Numerical("objective unbounded along an edge".into()));
            };
            let leaving = basis[k];
            in_basis[leaving] = false;
            in_basis[i_new] = true;
            basis[k] = i_new;
            // recompute exactly through the new basis to avoid drift
            coef = match solve_basis(problem, &basis) {
                Some(c) => c,
                None => {
                    for (cj, dj) in coef.iter_mut().zip(&delta) {
                        *cj += lam * dj;
                    }
                    coef
                }
            };
            pivots += 1;
            moved = true;
            break;
        }
        if !moved {
            break;
        }
    }

    let objective = problem.objective(&coef);
    let _ = y;
    Ok(QrSolution {
        coef,
        objective,
        iterations: ipm_iters + pivots,
        converged: slack <= 1e-6 * n as f64,
        basis,
        certificate_slack: slack,
    })
}

/// Check the subgradient optimality condition at `coef`: for every column the
/// score sum can be balanced by giving each zero residual a weight in
/// `[τ−1, τ]`. Returns the smallest slack found by a feasibility search over
/// the zero-residual weights (0 means certified).
pub fn certificate_violation(problem: &LinearQrProblem, coef: &[f64], zero_tol: f64) -> f64 {
    let n = problem.n();
    let d = problem.d();
    let tau = problem.tau;
    let t = tau.value();
    let resid = problem.residuals(coef);
    let zeros: Vec<usize> = (0..n).filter(|&i| resid[i].abs() <= zero_tol).collect();
    let mut g = vec![0.0; d];
    for i in 0..n {
        if resid[i].abs() > zero_tol {
            let ps = psi(resid[i], tau);
            for (gj, xj) in g.iter_mut().zip(problem.row(i)) {
                *gj += ps * xj;
            }
        }
    }
    if zeros.is_empty() {
        return g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    // Projected gradient on min ‖g + Σ_z w_z x_z‖² over the box [τ−1, τ].
    let mut wts = vec![t - 0.5; zeros.len()];
    let lips: f64 = zeros.iter().map(|&i| dot(problem.row(i), problem.row(i))).sum::<f64>().max(1e-12);
    let step = 1.0 / lips;
    let mut best = f64::INFINITY;
    for _ in 0..20_000 {
        let mut resv = g.clone();
        for (wz, &i) in wts.iter().zip(&zeros) {
            for (rv, xj) in resv.iter_mut().zip(problem.row(i)) {
                *rv += wz * xj;
            }
        }
        let inf = resv.iter().map(|v| v.abs()).fold(0.0, f64::max);
        best = best.min(inf);
        if best < 1e-12 {
            break;
        }
        for (wz, &i) in wts.iter_mut().zip(&zeros) {
            let grad = dot(problem.row(i), &resv);
            *wz = (*wz - step * grad).clamp(t - 1.0, t);
        }
    }
    best
}
