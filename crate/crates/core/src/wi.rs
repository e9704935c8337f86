//! Working-independence estimation of the multi-kink model.
//!
//! For fixed kink locations `t` the model is linear in η, so the profile
//! objective `S_n(η̂(t), t)` is evaluated with the linear solver. The kink
//! locations are then searched over the constrained region
//! `M1+ε ≤ t₁ < … < t_K ≤ M2−ε` (adjacent kinks at least `min_gap` apart)
//! by multi-start local search.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MkqrError, Result};
use crate::linalg::{self, add_outer, norm_pdf, norm_quantile, Z_975};
use crate::model::{LongitudinalDataset, QuantileLevel, ThetaParams};
use crate::qr::{solve_linear_qr, solve_linear_qr_warm, LinearQrProblem, QrSolution};

/// Largest number of multi-start initial kink vectors.
pub const MAX_STARTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wi,
    Qif,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Wi => "wi",
            Method::Qif => "qif",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = MkqrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wi" => Ok(Method::Wi),
            "qif" | "wc" | "gee" => Ok(Method::Qif),
            other => Err(MkqrError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WiFitConfig {
    pub tau: QuantileLevel,
    pub k: usize,
    /// Absolute edge buffer ε. `None` uses 5% of the support width.
    pub edge_buffer: Option<f64>,
    pub grid_size: usize,
    pub max_profile_iter: usize,
    pub tol: f64,
    /// Absolute minimum spacing of adjacent kinks. `None` uses 2% of the support width.
    pub min_gap: Option<f64>,
    /// Number of best initial kink vectors that are refined locally.
    pub n_refine: usize,
}

impl WiFitConfig {
    pub fn new(tau: QuantileLevel, k: usize) -> Self {
        Self {
            tau,
            k,
            edge_buffer: None,
            grid_size: 20,
            max_profile_iter: 50,
            tol: 1e-9,
            min_gap: None,
            n_refine: 3,
        }
    }

    /// Resolve (ε, min_gap) against the support of `data`.
    pub fn region(&self, data: &LongitudinalDataset) -> Result<Region> {
        let (m1, m2) = data.support();
        let range = m2 - m1;
        let eps = self.edge_buffer.unwrap_or(0.05 * range);
        let gap = self.min_gap.unwrap_or(0.02 * range);
        if !(eps > 0.0) || !(gap > 0.0) {
            return Err(MkqrError::Config("edge buffer and min_gap must be positive".into()));
        }
        if self.grid_size < self.k {
            return Err(MkqrError::Config(format!(
                "grid_size {} is smaller than K = {}",
                self.grid_size, self.k
            )));
        }
        if self.k > 0 && self.k as f64 * gap >= range - 2.0 * eps {
            return Err(MkqrError::Config(format!(
                "{} kinks with spacing {gap} do not fit in [{}, {}]",
                self.k,
                m1 + eps,
                m2 - eps
            )));
        }
        Ok(Region { lo: m1 + eps, hi: m2 - eps, gap })
    }
}

/// Feasible region Λ for the kink locations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub lo: f64,
    pub hi: f64,
    pub gap: f64,
}

impl Region {
    /// Clamp into the region keeping the spacing constraint.
    pub fn project(&self, t: &mut [f64]) {
        let k = t.len();
        if k == 0 {
            return;
        }
        let forward = |t: &mut [f64]| {
            t[0] = t[0].max(self.lo);
            for j in 1..k {
                t[j] = t[j].max(t[j - 1] + self.gap);
            }
        };
        forward(t);
        t[k - 1] = t[k - 1].min(self.hi);
        for j in (0..k - 1).rev() {
            t[j] = t[j].min(t[j + 1] - self.gap);
        }
        // rounding in the backward pass can push t₁ just below the edge
        if t[0] < self.lo {
            forward(t);
            t[k - 1] = t[k - 1].min(self.hi);
        }
    }

    pub fn contains(&self, t: &[f64]) -> bool {
        let tol = 1e-12 * (1.0 + self.hi.abs().max(self.lo.abs()));
        t.first().is_none_or(|&a| a >= self.lo - tol)
            && t.last().is_none_or(|&b| b <= self.hi + tol)
            && t.windows(2).all(|w| w[1] - w[0] >= self.gap - tol)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Best profile objective after each local-search iteration of the winning start.
    pub profile_trace: Vec<f64>,
    pub starts: usize,
    pub evaluations: usize,
    pub density_clamped: usize,
    pub bandwidth: f64,
    pub ridge_used: bool,
    pub psd_clipped: bool,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Estimated model with covariance and Wald intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: ThetaParams,
    pub tau: QuantileLevel,
    pub k: usize,
    /// `S_n` at the estimate.
    pub objective: f64,
    pub cov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub ci95: Vec<[f64; 2]>,
    pub sic: f64,
    pub converged: bool,
    pub method: Method,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        data: &LongitudinalDataset,
        theta: ThetaParams,
        tau: QuantileLevel,
        objective: f64,
        cov: DMatrix<f64>,
        converged: bool,
        method: Method,
        diagnostics: FitDiagnostics,
    ) -> Self {
        let v = theta.to_vec();
        let se: Vec<f64> = (0..v.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
        let ci95 = v.iter().zip(&se).map(|(&m, &s)| [m - Z_975 * s, m + Z_975 * s]).collect();
        let k = theta.k();
        Self {
            sic: sic(objective, data.n_obs(), data.p(), k),
            theta,
            tau,
            k,
            objective,
            cov: linalg::to_rows(&cov),
            se,
            ci95,
            converged,
            method,
            diagnostics,
        }
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        linalg::from_rows(&self.cov)
    }
}

/// Linear design `(1, x, (x−t_k)₊, z)` for fixed kinks, row-major.
pub fn linear_design(data: &LongitudinalDataset, t: &[f64]) -> (Vec<f64>, usize) {
    let k = t.len();
    let p = data.p();
    let d = 2 + k + p;
    let n = data.n_obs();
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let x = data.x()[r];
        out.push(1.0);
        out.push(x);
        out.extend(t.iter().map(|&tk| (x - tk).max(0.0)));
        out.extend_from_slice(data.z_row(r));
    }
    (out, d)
}

/// Step 1: linear QR with the kinks held fixed.
pub fn fit_given_t(data: &LongitudinalDataset, t: &[f64], tau: QuantileLevel) -> Result<QrSolution> {
    let (design, d) = linear_design(data, t);
    solve_linear_qr(&LinearQrProblem::new(design, d, data.y().to_vec(), tau)?)
}

/// Schwarz-type criterion `log S + log(n)/(2n)·(2+p+2k)`; the objective is
/// floored at `1e-12`.
pub fn sic(objective: f64, n: usize, p: usize, k: usize) -> f64 {
    let n = n.max(1) as f64;
    objective.max(1e-12).ln() + n.ln() / (2.0 * n) * (2 + p + 2 * k) as f64
}

struct Profile<'a> {
    data: &'a LongitudinalDataset,
    tau: QuantileLevel,
    cache: HashMap<Vec<u64>, Option<(f64, Vec<f64>)>>,
    /// Basis of the latest successful solve, reused as a warm start.
    last_basis: Option<Vec<usize>>,
}

impl<'a> Profile<'a> {
    fn new(data: &'a LongitudinalDataset, tau: QuantileLevel) -> Self {
        Self { data, tau, cache: HashMap::new(), last_basis: None }
    }

    /// Profile objective and η̂(t); `None` when the design is singular.
    fn eval(&mut self, t: &[f64]) -> Option<(f64, Vec<f64>)> {
        let key: Vec<u64> = t.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.get(&key) {
            return hit.clone();
        }
        let (design, d) = linear_design(self.data, t);
        let sol = LinearQrProblem::new(design, d, self.data.y().to_vec(), self.tau).and_then(|p| {
            p.check_rank()?;
            match &self.last_basis {
                Some(b) => solve_linear_qr_warm(&p, b),
                None => solve_linear_qr(&p),
            }
        });
        let out = sol.ok().map(|s| {
            self.last_basis = Some(s.basis);
            (s.objective, s.coef)
        });
        self.cache.insert(key, out.clone());
        out
    }

    fn value(&mut self, t: &[f64]) -> f64 {
        self.eval(t).map_or(f64::INFINITY, |(s, _)| s)
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n.saturating_sub(k));
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Initial kink vectors: ordered K-subsets of a quantile grid of X inside Λ.
pub fn initial_grid(data: &LongitudinalDataset, k: usize, grid_size: usize, region: &Region) -> Vec<Vec<f64>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut inside: Vec<f64> = data.x().iter().copied().filter(|&x| x >= region.lo && x <= region.hi).collect();
    inside.sort_by(f64::total_cmp);
    let mut g = grid_size.max(k);
    while g > k && binomial(g, k) > MAX_STARTS {
        g -= 1;
    }
    let mut points: Vec<f64> = if inside.is_empty() {
        (1..=g).map(|j| region.lo + (region.hi - region.lo) * j as f64 / (g + 1) as f64).collect()
    } else {
        (1..=g).map(|j| linalg::quantile_sorted(&inside, j as f64 / (g + 1) as f64)).collect()
    };
    points.dedup();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    if points.len() < k {
        let mut t: Vec<f64> = (1..=k).map(|j| region.lo + (region.hi - region.lo) * j as f64 / (k + 1) as f64).collect();
        region.project(&mut t);
        return vec![t];
    }
    let m = points.len();
    loop {
        let t: Vec<f64> = idx.iter().map(|&i| points[i]).collect();
        if region.contains(&t) {
            out.push(t);
        }
        let mut j = k;
        loop {
            if j == 0 {
                if out.is_empty() {
                    let mut t: Vec<f64> =
                        (1..=k).map(|j| region.lo + (region.hi - region.lo) * j as f64 / (k + 1) as f64).collect();
                    region.project(&mut t);
                    out.push(t);
                }
                return out;
            }
            j -= 1;
            if idx[j] < m - k + j {
                idx[j] += 1;
                for l in j + 1..k {
                    idx[l] = idx[l - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Point estimate before covariance estimation.
#[derive(Debug, Clone)]
pub struct WiEstimate {
    pub theta: ThetaParams,
    pub objective: f64,
    pub converged: bool,
    pub trace: Vec<f64>,
    pub starts: usize,
    pub evaluations: usize,
    pub iterations: usize,
}

struct LocalResult {
    t: Vec<f64>,
    value: f64,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn refine(profile: &mut Profile<'_>, region: &Region, start: Vec<f64>, cfg: &WiFitConfig, range: f64) -> LocalResult {
    let k = start.len();
    let data = profile.data;
    let tau = profile.tau;
    let mut t = start;
    let mut value = profile.value(&t);
    let mut trace = vec![value];
    let mut step = 0.05 * range;
    let step_min = 1e-6 * range;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..cfg.max_profile_iter {
        iterations += 1;
        let before = value;
        let mut moved = false;

        // linearized step: regress y on the full gradient design at θ(t)
        if let Some((_, eta)) = profile.eval(&t) {
            if let Ok(theta) = ThetaParams::from_eta(&eta, &t) {
                let dim = theta.dim();
                let n = data.n_obs();
                let mut design = vec![0.0; n * dim];
                for r in 0..n {
                    theta.design_into(data.x()[r], data.z_row(r), &mut design[r * dim..(r + 1) * dim]);
                }
                let step_t = LinearQrProblem::new(design, dim, data.y().to_vec(), tau)
                    .and_then(|p| solve_linear_qr(&p))
                    .ok()
                    .map(|s| s.coef[dim - k..].to_vec());
                if let Some(dt) = step_t {
                    let mut lam = 1.0;
                    for _ in 0..12 {
                        let mut cand: Vec<f64> = t.iter().zip(&dt).map(|(a, b)| a + lam * b).collect();
                        region.project(&mut cand);
                        if cand.iter().all(|v| v.is_finite()) {
                            let v = profile.value(&cand);
                            if v < value {
                                t = cand;
                                value = v;
                                moved = true;
                                break;
                            }
                        }
                        lam *= 0.5;
                    }
                }
            }
        }

        // compass search on t when the linearized step fails
        if !moved {
            while step >= step_min && !moved {
                for j in 0..k {
                    for dir in [1.0, -1.0] {
                        let mut cand = t.clone();
                        cand[j] += dir * step;
                        region.project(&mut cand);
                        if cand == t {
                            continue;
                        }
                        let v = profile.value(&cand);
                        if v < value {
                            t = cand;
                            value = v;
                            moved = true;
                            break;
                        }
                    }
                    if moved {
                        break;
                    }
                }
                if !moved {
                    step *= 0.5;
                }
            }
        }
        trace.push(value);
        if !moved || (before - value).abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    LocalResult { t, value, trace, converged, iterations }
}

/// Two-step profile estimate of θ without covariance.
pub fn estimate_wi(data: &LongitudinalDataset, cfg: &WiFitConfig) -> Result<WiEstimate> {
    let d = 2 + data.p() + 2 * cfg.k;
    if data.n_obs() <= d {
        return Err(MkqrError::Validation(format!(
            "need more than {d} observations for K = {}",
            cfg.k
        )));
    }
    let region = cfg.region(data)?;
    let (m1, m2) = data.support();
    let mut profile = Profile::new(data, cfg.tau);

    if cfg.k == 0 {
        let sol = fit_given_t(data, &[], cfg.tau)?;
        let theta = ThetaParams::from_eta(&sol.coef, &[])?;
        return Ok(WiEstimate {
            theta,
            objective: sol.objective,
            converged: sol.converged,
            trace: vec![sol.objective],
            starts: 1,
            evaluations: 1,
            iterations: 0,
        });
    }

    let starts = initial_grid(data, cfg.k, cfg.grid_size, &region);
    let mut scored: Vec<(f64, Vec<f64>)> = starts.iter().map(|t| (profile.value(t), t.clone())).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| lex_cmp(&a.1, &b.1)));
    if !scored[0].0.is_finite() {
        return Err(MkqrError::Numerical("every initial kink vector gives a singular design".into()));
    }

    let mut best: Option<LocalResult> = None;
    for (v, t0) in scored.iter().take(cfg.n_refine.max(1)) {
        if !v.is_finite() {
            continue;
        }
        let res = refine(&mut profile, &region, t0.clone(), cfg, m2 - m1);
        let better = match &best {
            None => true,
            Some(b) => res.value < b.value || (res.value == b.value && lex_cmp(&res.t, &b.t).is_lt()),
        };
        if better {
            best = Some(res);
        }
    }
    let best = best.ok_or_else(|| MkqrError::Numerical("profile search failed".into()))?;
    let (value, eta) = profile
        .eval(&best.t)
        .ok_or_else(|| MkqrError::Numerical("final design is singular".into()))?;
    let theta = ThetaParams::from_eta(&eta, &best.t)?;
    Ok(WiEstimate {
        theta,
        objective: value,
        converged: best.converged,
        trace: best.trace,
        starts: starts.len(),
        evaluations: profile.cache.len(),
        iterations: best.iterations,
    })
}

/// Profile fit followed by the sandwich covariance.
pub fn profile_fit_wi(data: &LongitudinalDataset, cfg: &WiFitConfig) -> Result<FitResult> {
    let est = estimate_wi(data, cfg)?;
    let cov = sandwich_cov_wi(data, &est.theta, cfg.tau)?;
    let diagnostics = FitDiagnostics {
        profile_trace: est.trace,
        starts: est.starts,
        evaluations: est.evaluations,
        density_clamped: cov.density.clamped,
        bandwidth: cov.density.bandwidth,
        ridge_used: cov.ridge_used,
        psd_clipped: cov.psd_clipped,
        iterations: est.iterations,
        notes: Vec::new(),
    };
    Ok(FitResult::assemble(data, est.theta, cfg.tau, est.objective, cov.cov, est.converged, Method::Wi, diagnostics))
}

/// Per-k outcome of SIC selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KCandidate {
    pub k: usize,
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub k_hat: usize,
    pub candidates: Vec<KCandidate>,
}

impl Selection {
    pub fn chosen(&self) -> &FitResult {
        self.candidates
            .iter()
            .find(|c| c.k == self.k_hat)
            .and_then(|c| c.fit.as_ref())
            .expect("selected k has a fit")
    }
}

/// Fit `k = 0..=k_max` and pick the SIC minimizer (ties go to the smaller k).
/// `fit_k` produces the fit for a given k.
pub fn select_k_with<F>(k_max: usize, mut fit_k: F) -> Result<Selection>
where
    F: FnMut(usize) -> Result<FitResult>,
{
    let mut candidates = Vec::with_capacity(k_max + 1);
    let mut best: Option<(usize, f64)> = None;
    for k in 0..=k_max {
        match fit_k(k) {
            Ok(fit) => {
                if best.is_none_or(|(_, s)| fit.sic < s) {
                    best = Some((k, fit.sic));
                }
                candidates.push(KCandidate { k, fit: Some(fit), error: None });
            }
            Err(e) => candidates.push(KCandidate { k, fit: None, error: Some(e.to_string()) }),
        }
    }
    match best {
        Some((k_hat, _)) => Ok(Selection { k_hat, candidates }),
        None => Err(MkqrError::Numerical(format!(
            "every candidate kink count failed: {}",
            candidates.iter().filter_map(|c| c.error.clone()).collect::<Vec<_>>().join("; ")
        ))),
    }
}

/// SIC selection with the working-independence estimator.
pub fn select_k_wi(data: &LongitudinalDataset, base: &WiFitConfig, k_max: usize) -> Result<Selection> {
    select_k_with(k_max, |k| {
        let cfg = WiFitConfig { k, ..base.clone() };
        profile_fit_wi(data, &cfg)
    })
}

/// Hall–Sheather bandwidth, clamped so that `τ ± h ∈ (0.01, 0.99)`.
pub fn hall_sheather(n: usize, tau: QuantileLevel) -> Result<f64> {
    let t = tau.value();
    if t <= 0.01 || t >= 0.99 {
        return Err(MkqrError::Validation(format!(
            "density estimation needs 0.01 < τ < 0.99, got {t}"
        )));
    }
    let q = norm_quantile(t);
    let f = norm_pdf(q);
    let z = norm_quantile(0.975);
    let h = (n as f64).powf(-1.0 / 3.0) * z.powf(2.0 / 3.0) * (1.5 * f * f / (2.0 * q * q + 1.0)).powf(1.0 / 3.0);
    let cap = 0.999 * (t - 0.01).min(0.99 - t);
    Ok(h.min(cap))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub values: Vec<f64>,
    pub clamped: usize,
    pub bandwidth: f64,
}

/// Difference-quotient density `2h / (Q̂(τ+h) − Q̂(τ−h) − eps)` clamped at zero.
pub fn density_from_quantiles(upper: &[f64], lower: &[f64], h: f64) -> (Vec<f64>, usize) {
    let eps = f64::EPSILON.powf(2.0 / 3.0);
    let mut clamped = 0;
    let vals = upper
        .iter()
        .zip(lower)
        .map(|(u, l)| {
            let den = u - l - eps;
            if den > 0.0 {
                2.0 * h / den
            } else {
                clamped += 1;
                0.0
            }
        })
        .collect();
    (vals, clamped)
}

/// Conditional densities at the fitted τ-quantiles, re-fitting the linear
/// model at `τ ± h` with the kinks held at `t`.
pub fn density_quotient(data: &LongitudinalDataset, t: &[f64], tau: QuantileLevel, h: f64) -> Result<DensityEstimate> {
    let lo = QuantileLevel::new(tau.value() - h)?;
    let hi = QuantileLevel::new(tau.value() + h)?;
    let (design, d) = linear_design(data, t);
    let fit_at = |level: QuantileLevel| -> Result<Vec<f64>> {
        let p = LinearQrProblem::new(design.clone(), d, data.y().to_vec(), level)?;
        let s = solve_linear_qr(&p)?;
        Ok(p.fitted(&s.coef))
    };
    let upper = fit_at(hi)?;
    let lower = fit_at(lo)?;
    let (values, clamped) = density_from_quantiles(&upper, &lower, h);
    Ok(DensityEstimate { values, clamped, bandwidth: h })
}

/// Pairwise concordance term `1{e<0, e'<0} − (τ/2)(1{e<0} + 1{e'<0})`.
pub fn pair_concordance(e1: f64, e2: f64, tau: f64) -> f64 {
    let a = (e1 < 0.0) as u8 as f64;
    let b = (e2 < 0.0) as u8 as f64;
    a * b - 0.5 * tau * (a + b)
}

#[derive(Debug, Clone)]
pub struct CovEstimate {
    pub cov: DMatrix<f64>,
    pub density: DensityEstimate,
    pub ridge_used: bool,
    pub psd_clipped: bool,
}

/// Full gradient design rows `𝒳_ij(θ)`, row-major.
pub(crate) fn gradient_design(data: &LongitudinalDataset, theta: &ThetaParams) -> Vec<f64> {
    let dim = theta.dim();
    let n = data.n_obs();
    let mut out = vec![0.0; n * dim];
    for r in 0..n {
        theta.design_into(data.x()[r], data.z_row(r), &mut out[r * dim..(r + 1) * dim]);
    }
    out
}

/// `Σ̂` of the sandwich: independence part plus within-subject concordance
/// cross terms, scaled by `1/n`.
pub fn score_covariance(data: &LongitudinalDataset, design: &[f64], dim: usize, resid: &[f64], tau: f64, cross: bool) -> DMatrix<f64> {
    let n = data.n_obs();
    let mut sigma = DMatrix::<f64>::zeros(dim, dim);
    for r in 0..n {
        let row = &design[r * dim..(r + 1) * dim];
        add_outer(&mut sigma, tau * (1.0 - tau), row, row);
    }
    if cross {
        // Σ_{j≠j'} c_jj' 𝒳_j 𝒳_j'ᵀ with c from `pair_concordance`, expanded
        // through the per-subject sums v = Σ I_j 𝒳_j and s = Σ 𝒳_j.
        let mut v = vec![0.0; dim];
        let mut s = vec![0.0; dim];
        for i in 0..data.n_subjects() {
            v.iter_mut().for_each(|a| *a = 0.0);
            s.iter_mut().for_each(|a| *a = 0.0);
            for r in data.rows(i) {
                let row = &design[r * dim..(r + 1) * dim];
                let neg = resid[r] < 0.0;
                for c in 0..dim {
                    s[c] += row[c];
                    if neg {
                        v[c] += row[c];
                    }
                }
                if neg {
                    add_outer(&mut sigma, -(1.0 - tau), row, row);
                }
            }
            add_outer(&mut sigma, 1.0, &v, &v);
            add_outer(&mut sigma, -0.5 * tau, &v, &s);
            add_outer(&mut sigma, -0.5 * tau, &s, &v);
        }
    }
    sigma / n as f64
}

/// Sandwich covariance `Ĥ⁻¹ Σ̂ Ĥ⁻¹ / n` of the working-independence estimate.
pub fn sandwich_cov_wi(data: &LongitudinalDataset, theta: &ThetaParams, tau: QuantileLevel) -> Result<CovEstimate> {
    sandwich_cov_wi_opts(data, theta, tau, true)
}

/// As [`sandwich_cov_wi`]; `cross = false` drops the within-subject terms.
pub fn sandwich_cov_wi_opts(data: &LongitudinalDataset, theta: &ThetaParams, tau: QuantileLevel, cross: bool) -> Result<CovEstimate> {
    let n = data.n_obs();
    let h = hall_sheather(n, tau)?;
    let density = density_quotient(data, &theta.t, tau, h)?;
    let dim = theta.dim();
    let design = gradient_design(data, theta);
    let mut hmat = DMatrix::<f64>::zeros(dim, dim);
    for r in 0..n {
        let row = &design[r * dim..(r + 1) * dim];
        add_outer(&mut hmat, density.values[r], row, row);
    }
    hmat /= n as f64;
    let resid = crate::model::residuals(data, theta);
    let sigma = score_covariance(data, &design, dim, &resid, tau.value(), cross);
    let (hinv, ridge_used) = linalg::robust_inverse(&hmat);
    let raw = &hinv * sigma * &hinv / n as f64;
    let (cov, psd_clipped) = linalg::clip_psd(&raw);
    Ok(CovEstimate { cov, density, ridge_used, psd_clipped })
}
