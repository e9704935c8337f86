//! Simulation designs and Monte Carlo studies.
//!
//! Two generating processes share the model
//! `Y = α₀ + α₁X + γZ + Σ β_k (X − t_k)₊ + e` with three error structures:
//! compound symmetry (`a_i + ε_ij`, ε ~ t₃), AR(1) scaled by
//! `v(x) = 3.2 − 0.2x`, and a heteroscedastic random-intercept form.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MkqrError, Result};
use crate::linalg::norm_quantile;
use crate::model::{LongitudinalDataset, Observation, QuantileLevel, Subject, ThetaParams};
use crate::kink_test::{bootstrap_pvalue, TestGrid, LEVEL};
use crate::qif::{fit_qif, select_k_qif, BasisKind, QifConfig};
use crate::seed::mix_seed;
use crate::wi::{profile_fit_wi, select_k_wi, FitResult, WiFitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dgp {
    #[serde(rename = "DGP1")]
    Dgp1,
    #[serde(rename = "DGP2")]
    Dgp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCase {
    #[serde(rename = "CS")]
    Cs,
    #[serde(rename = "AR1")]
    Ar1,
    #[serde(rename = "HET")]
    Het,
}

impl std::str::FromStr for Dgp {
    type Err = MkqrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dgp1" | "1" => Ok(Dgp::Dgp1),
            "dgp2" | "2" => Ok(Dgp::Dgp2),
            other => Err(MkqrError::Config(format!("unknown dgp '{other}'"))),
        }
    }
}

impl std::str::FromStr for ErrorCase {
    type Err = MkqrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cs" | "case1" | "1" => Ok(ErrorCase::Cs),
            "ar1" | "case2" | "2" => Ok(ErrorCase::Ar1),
            "het" | "case3" | "3" => Ok(ErrorCase::Het),
            other => Err(MkqrError::Config(format!("unknown error case '{other}'"))),
        }
    }
}

impl std::fmt::Display for ErrorCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorCase::Cs => "CS",
            ErrorCase::Ar1 => "AR1",
            ErrorCase::Het => "HET",
        })
    }
}

impl std::fmt::Display for Dgp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dgp::Dgp1 => "DGP1",
            Dgp::Dgp2 => "DGP2",
        })
    }
}

/// Share of subjects with `z = 1` under the second design.
pub const DGP2_Z_RATE: f64 = 22.0 / 91.0;
/// Day range of the second design.
pub const DGP2_DAYS: (i32, i32) = (-8, 15);
const AR_RHO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub dgp: Dgp,
    pub case: ErrorCase,
    pub beta: Vec<f64>,
    pub t: Vec<f64>,
    /// Number of subjects; must be divisible by 5.
    pub n_subjects: usize,
    pub taus: Vec<f64>,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(dgp: Dgp, case: ErrorCase, beta: Vec<f64>, t: Vec<f64>, n_subjects: usize, seed: u64) -> Self {
        Self { dgp, case, beta, t, n_subjects, taus: vec![0.5], seed }
    }

    pub fn k(&self) -> usize {
        self.t.len()
    }

    /// Fixed `(α₀, α₁, γ)` of the design.
    pub fn base_coefficients(&self) -> (f64, f64, f64) {
        match self.dgp {
            Dgp::Dgp1 => (1.0, 1.0, 0.2),
            Dgp::Dgp2 => (-1.0, 0.0, 0.5),
        }
    }

    /// Nominal support of X.
    pub fn x_support(&self) -> (f64, f64) {
        match (self.dgp, self.case) {
            (Dgp::Dgp2, _) => (DGP2_DAYS.0 as f64, DGP2_DAYS.1 as f64),
            (Dgp::Dgp1, ErrorCase::Ar1) => (0.5, 12.0),
            (Dgp::Dgp1, _) => (0.0, 10.0),
        }
    }

    /// Model parameters of the generating equation (before quantile centering).
    pub fn theta_model(&self) -> Result<ThetaParams> {
        let (a0, a1, g) = self.base_coefficients();
        ThetaParams::new(a0, a1, self.beta.clone(), vec![g], self.t.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || !self.n_subjects.is_multiple_of(5) {
            return Err(MkqrError::Config(format!(
                "number of subjects must be a positive multiple of 5, got {}",
                self.n_subjects
            )));
        }
        if self.beta.len() != self.t.len() {
            return Err(MkqrError::Config("beta and t must have the same length".into()));
        }
        if self.t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MkqrError::Config("kink locations must be strictly increasing".into()));
        }
        let (lo, hi) = self.x_support();
        if let Some(bad) = self.t.iter().find(|&&t| !(t > lo && t < hi)) {
            return Err(MkqrError::Config(format!(
                "kink location {bad} is not interior to the covariate range [{lo}, {hi}]"
            )));
        }
        for &tau in &self.taus {
            QuantileLevel::new(tau).map_err(|e| MkqrError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Parameter vector whose model is the conditional τ-quantile of Y.
    pub fn theta_tau(&self, tau: QuantileLevel) -> Result<ThetaParams> {
        let mut th = self.theta_model()?;
        match self.case {
            ErrorCase::Cs => th.alpha0 += cs_error_quantile(tau.value()),
            ErrorCase::Ar1 => {
                let c = (1.0 / (1.0 - AR_RHO * AR_RHO)).sqrt() * norm_quantile(tau.value());
                th.alpha0 += 3.2 * c;
                th.alpha1 -= 0.2 * c;
            }
            ErrorCase::Het => {
                let c = norm_quantile(tau.value());
                th.alpha0 += 3.2 * c;
                th.alpha1 -= 0.2 * c;
            }
        }
        Ok(th)
    }
}

/// CDF of Student's t with 3 degrees of freedom.
pub fn t3_cdf(x: f64) -> f64 {
    let s = 3f64.sqrt();
    0.5 + (x / (s * (1.0 + x * x / 3.0)) + (x / s).atan()) / std::f64::consts::PI
}

/// CDF of `a + ε` with `a ~ N(0,1)` and `ε ~ t₃` (Simpson quadrature over a).
pub fn cs_error_cdf(q: f64) -> f64 {
    let m = 2400;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / m as f64;
    let f = |a: f64| (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt() * t3_cdf(q - a);
    let mut s = f(lo) + f(hi);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// τ-quantile of `a + ε` by bisection. The distribution is symmetric, so
/// only the upper half is searched.
pub fn cs_error_quantile(tau: f64) -> f64 {
    if tau == 0.5 {
        return 0.0;
    }
    if tau < 0.5 {
        return -cs_error_quantile(1.0 - tau);
    }
    let (mut lo, mut hi) = (0.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cs_error_cdf(mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn het_scale(x: f64) -> f64 {
    let v = 3.2 - 0.2 * x;
    // x > 11 would give a negative radicand; the scale is floored at zero there
    (v * v - 1.0).max(0.0).sqrt()
}

/// Draw one dataset from `cfg` with the given generator.
pub fn generate_with(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<LongitudinalDataset> {
    cfg.validate()?;
    let theta = cfg.theta_model()?;
    let per_size = cfg.n_subjects / 5;
    let t3 = StudentT::new(3.0).map_err(|e| MkqrError::Numerical(e.to_string()))?;
    let z_dist = Bernoulli::new(DGP2_Z_RATE).map_err(|e| MkqrError::Numerical(e.to_string()))?;
    let ar_init = Normal::new(0.0, (1.0 / (1.0 - AR_RHO * AR_RHO)).sqrt()).map_err(|e| MkqrError::Numerical(e.to_string()))?;
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let m = 6 + i / per_size;
        let xs: Vec<f64> = match (cfg.dgp, cfg.case) {
            (Dgp::Dgp1, ErrorCase::Ar1) => {
                let x0 = rng.random_range(0.5..7.5);
                (0..m).map(|j| x0 + 0.5 * j as f64).collect()
            }
            (Dgp::Dgp1, _) => (0..m).map(|_| rng.random_range(0.0..10.0)).collect(),
            (Dgp::Dgp2, _) => {
                let span = (DGP2_DAYS.1 - DGP2_DAYS.0 + 1) as usize;
                let start = DGP2_DAYS.0 + rng.random_range(0..=(span - m) as i32);
                (0..m).map(|j| (start + j as i32) as f64).collect()
            }
        };
        let z_subject = if cfg.dgp == Dgp::Dgp2 { z_dist.sample(rng) as u8 as f64 } else { 0.0 };
        let zs: Vec<f64> = match cfg.dgp {
            Dgp::Dgp1 => (0..m).map(|_| rng.random_range(0.0..10.0)).collect(),
            Dgp::Dgp2 => vec![z_subject; m],
        };
        let errors: Vec<f64> = match cfg.case {
            ErrorCase::Cs => {
                let a: f64 = rng.sample(StandardNormal);
                (0..m).map(|_| a + t3.sample(rng)).collect()
            }
            ErrorCase::Ar1 => {
                let mut u: f64 = ar_init.sample(rng);
                xs.iter()
                    .map(|&x| {
                        let eps: f64 = rng.sample(StandardNormal);
                        u = AR_RHO * u + eps;
                        (3.2 - 0.2 * x) * u
                    })
                    .collect()
            }
            ErrorCase::Het => {
                let a: f64 = rng.sample(StandardNormal);
                xs.iter()
                    .map(|&x| {
                        let eps: f64 = rng.sample(StandardNormal);
                        a + het_scale(x) * eps
                    })
                    .collect()
            }
        };
        let obs = (0..m)
            .map(|j| {
                let z = vec![zs[j]];
                Observation { y: theta.predict_unchecked(xs[j], &z) + errors[j], x: xs[j], z }
            })
            .collect();
        subjects.push(Subject { id: format!("{}", i + 1), obs });
    }
    LongitudinalDataset::new(subjects)
}

/// Dataset for replication `rep`; streams depend only on `(cfg.seed, rep)`.
pub fn generate_rep(cfg: &DgpConfig, rep: u64) -> Result<LongitudinalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[rep]));
    generate_with(cfg, &mut rng)
}

/// Dataset for replication 0.
pub fn generate(cfg: &DgpConfig) -> Result<LongitudinalDataset> {
    generate_rep(cfg, 0)
}

/// Same covariates as [`generate_rep`] with all errors set to zero.
pub fn generate_noiseless(cfg: &DgpConfig, rep: u64) -> Result<LongitudinalDataset> {
    let data = generate_rep(cfg, rep)?;
    let theta = cfg.theta_model()?;
    let y = (0..data.n_obs()).map(|r| theta.predict_unchecked(data.x()[r], data.z_row(r))).collect();
    data.with_responses(y)
}

/// Parameters of the synthetic progesterone-shaped panel.
pub fn progesterone_theta() -> ThetaParams {
    ThetaParams::new(-0.760, 0.002, vec![0.381, -0.445], vec![0.205], vec![-0.925, 5.666]).expect("valid constants")
}

/// Synthetic panel shaped like a cycle-day progesterone study: 91 cycles,
/// days −8..15 with 9 to 24 recorded days each, 22 cycles with `z = 1`.
/// `strength` scales the slope changes (1 reproduces the reference kinks,
/// 0 gives a linear model).
pub fn progesterone_like(seed: u64, strength: f64) -> Result<LongitudinalDataset> {
    let mut theta = progesterone_theta();
    theta.beta.iter_mut().for_each(|b| *b *= strength);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x9e0]));
    let a_dist = Normal::new(0.0, 0.4).map_err(|e| MkqrError::Numerical(e.to_string()))?;
    let e_dist = Normal::new(0.0, 0.5).map_err(|e| MkqrError::Numerical(e.to_string()))?;
    let days: Vec<i32> = (DGP2_DAYS.0..=DGP2_DAYS.1).collect();
    let mut subjects = Vec::with_capacity(91);
    for i in 0..91 {
        let m = rng.random_range(9..=days.len());
        let mut idx = sample(&mut rng, days.len(), m).into_vec();
        idx.sort_unstable();
        let z = if i < 22 { 1.0 } else { 0.0 };
        let a = a_dist.sample(&mut rng);
        let obs = idx
            .into_iter()
            .map(|d| {
                let x = days[d] as f64;
                let zv = vec![z];
                Observation { y: theta.predict_unchecked(x, &zv) + a + e_dist.sample(&mut rng), x, z: zv }
            })
            .collect();
        subjects.push(Subject { id: format!("cycle{:02}", i + 1), obs });
    }
    LongitudinalDataset::new(subjects)
}

/// Estimator used inside a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "WI")]
    Wi,
    /// QIF with working-correlation basis.
    #[serde(rename = "WC")]
    Qif(BasisKind),
}

impl Estimator {
    /// Parse `wi`, `qif`/`wc` (basis from `case`) or `qif:<basis>`.
    pub fn parse_for(s: &str, case: ErrorCase) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, basis) = match s.split_once(':') {
            Some((h, b)) => (h.to_string(), Some(b.parse::<BasisKind>()?)),
            None => (s.clone(), None),
        };
        match head.as_str() {
            "wi" if basis.is_none() => Ok(Estimator::Wi),
            "qif" | "wc" => Ok(Estimator::Qif(basis.unwrap_or_else(|| default_basis(case)))),
            _ => Err(MkqrError::Config(format!("unknown estimator '{s}'"))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Wi => f.write_str("WI"),
            Estimator::Qif(b) => write!(f, "WC({b})"),
        }
    }
}

/// Working-correlation basis matched to an error structure.
pub fn default_basis(case: ErrorCase) -> BasisKind {
    match case {
        ErrorCase::Ar1 => BasisKind::Ar1,
        ErrorCase::Cs | ErrorCase::Het => BasisKind::Cs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub dgp: Dgp,
    pub case: ErrorCase,
    pub k: usize,
    pub n: usize,
    pub tau: f64,
    pub estimator: String,
    /// Fraction of completed replications with `K̂ = K`.
    pub rate: f64,
    /// `counts[k]` replications selected k kinks.
    pub counts: Vec<usize>,
    pub completed: usize,
    pub failures: usize,
    /// Mean seconds per replication. Kept out of JSON so reports stay
    /// reproducible.
    #[serde(skip)]
    pub mean_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRow {
    pub dgp: Dgp,
    pub case: ErrorCase,
    pub n: usize,
    pub tau: f64,
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    pub ese: f64,
    pub mse: f64,
    /// `None` when every interval has zero width (noise-free data).
    pub covp: Option<f64>,
    pub completed: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub dgp: Dgp,
    pub case: ErrorCase,
    pub k: usize,
    pub n: usize,
    pub tau: f64,
    pub beta1: f64,
    pub rate: f64,
    pub rejections: usize,
    pub completed: usize,
    pub failures: usize,
    /// Mean seconds per replication; CSV only.
    #[serde(skip)]
    pub mean_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection: Vec<SelectionRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub estimation: Vec<EstimationRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub power: Vec<PowerRow>,
    /// First error message of each failed replication, in replication order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

fn levels(cfg: &DgpConfig) -> Result<Vec<QuantileLevel>> {
    cfg.validate()?;
    if cfg.taus.is_empty() {
        return Err(MkqrError::Config("at least one quantile level is required".into()));
    }
    cfg.taus.iter().map(|&t| QuantileLevel::new(t)).collect()
}

fn check_reps(reps: usize) -> Result<()> {
    if reps == 0 {
        return Err(MkqrError::Config("reps must be at least 1".into()));
    }
    Ok(())
}

/// Fraction of replications selecting the true number of kinks, per
/// quantile level and estimator. Every estimator sees the same datasets.
pub fn run_selection_study(cfg: &DgpConfig, reps: usize, k_max: usize, estimators: &[Estimator]) -> Result<ExperimentReport> {
    check_reps(reps)?;
    let taus = levels(cfg)?;
    let k0 = cfg.k();
    if k_max < k0 {
        return Err(MkqrError::Config(format!("kmax = {k_max} is below the true K = {k0}")));
    }
    let cells: Vec<(QuantileLevel, Estimator)> = taus.iter().flat_map(|&t| estimators.iter().map(move |&e| (t, e))).collect();
    let per_rep: Vec<Vec<std::result::Result<(usize, f64), String>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = match generate_rep(cfg, rep as u64) {
                Ok(d) => d,
                Err(e) => return cells.iter().map(|_| Err(e.to_string())).collect(),
            };
            cells
                .iter()
                .map(|&(tau, est)| {
                    let start = Instant::now();
                    let base = WiFitConfig::new(tau, 0);
                    let sel = match est {
                        Estimator::Wi => select_k_wi(&data, &base, k_max),
                        Estimator::Qif(b) => select_k_qif(&data, &base, b, k_max),
                    }
                    .map_err(|e| e.to_string())?;
                    Ok((sel.k_hat, start.elapsed().as_secs_f64()))
                })
                .collect()
        })
        .collect();
    let mut report = ExperimentReport::default();
    for (c, &(tau, est)) in cells.iter().enumerate() {
        let mut counts = vec![0usize; k_max + 1];
        let (mut completed, mut time) = (0usize, 0.0);
        for (rep, r) in per_rep.iter().enumerate() {
            match &r[c] {
                Ok((k_hat, secs)) => {
                    counts[*k_hat] += 1;
                    completed += 1;
                    time += secs;
                }
                Err(e) => report.failures.push(format!("rep {rep}, tau {}, {est}: {e}", tau.value())),
            }
        }
        report.selection.push(SelectionRow {
            dgp: cfg.dgp,
            case: cfg.case,
            k: k0,
            n: cfg.n_subjects,
            tau: tau.value(),
            estimator: est.to_string(),
            rate: if completed > 0 { counts[k0] as f64 / completed as f64 } else { f64::NAN },
            counts,
            completed,
            failures: reps - completed,
            mean_time: if completed > 0 { time / completed as f64 } else { f64::NAN },
        });
    }
    Ok(report)
}

/// Per-parameter accuracy summaries of fitted values `est` with standard
/// errors `se` against `truth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub bias: f64,
    pub sd: f64,
    pub ese: f64,
    pub mse: f64,
    pub covp: Option<f64>,
}

/// Bias = mean error, SD with divisor `R − 1`, ESE = mean standard error,
/// MSE = mean squared error, CovP = share of 95% Wald intervals covering
/// the truth.
pub fn summarize(est: &[f64], se: &[f64], truth: f64) -> Summary {
    let r = est.len() as f64;
    let mean = est.iter().sum::<f64>() / r;
    let sd = if est.len() > 1 { (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt() } else { 0.0 };
    let ese = se.iter().sum::<f64>() / r;
    let mse = est.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / r;
    let covp = if se.iter().all(|&s| s <= 1e-10) {
        None
    } else {
        let hit = est.iter().zip(se).filter(|(v, s)| (*v - truth).abs() <= crate::linalg::Z_975 * **s).count();
        Some(hit as f64 / r)
    };
    Summary { bias: mean - truth, sd, ese, mse, covp }
}

/// Bias, SD, ESE, MSE and coverage with the true K, scored against the
/// τ-specific parameter vector.
pub fn run_estimation_study(cfg: &DgpConfig, reps: usize, estimators: &[Estimator]) -> Result<ExperimentReport> {
    check_reps(reps)?;
    let taus = levels(cfg)?;
    let k = cfg.k();
    let cells: Vec<(QuantileLevel, Estimator)> = taus.iter().flat_map(|&t| estimators.iter().map(move |&e| (t, e))).collect();
    let per_rep: Vec<Vec<std::result::Result<(Vec<f64>, Vec<f64>), String>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = match generate_rep(cfg, rep as u64) {
                Ok(d) => d,
                Err(e) => return cells.iter().map(|_| Err(e.to_string())).collect(),
            };
            let mut wi_cache: Vec<Option<std::result::Result<FitResult, String>>> = taus.iter().map(|_| None).collect();
            cells
                .iter()
                .map(|&(tau, est)| {
                    let ti = taus.iter().position(|&t| t == tau).expect("tau from list");
                    let wi = wi_cache[ti]
                        .get_or_insert_with(|| profile_fit_wi(&data, &WiFitConfig::new(tau, k)).map_err(|e| e.to_string()))
                        .clone()?;
                    let fit = match est {
                        Estimator::Wi => wi,
                        Estimator::Qif(b) => fit_qif(&data, &QifConfig::new(tau, b, wi.theta)).map_err(|e| e.to_string())?,
                    };
                    Ok((fit.theta.to_vec(), fit.se))
                })
                .collect()
        })
        .collect();
    let mut report = ExperimentReport::default();
    let names = ThetaParams::names(k, 1);
    for (c, &(tau, est)) in cells.iter().enumerate() {
        let truth = cfg.theta_tau(tau)?.to_vec();
        let mut ok: Vec<&(Vec<f64>, Vec<f64>)> = Vec::new();
        for (rep, r) in per_rep.iter().enumerate() {
            match &r[c] {
                Ok(v) => ok.push(v),
                Err(e) => report.failures.push(format!("rep {rep}, tau {}, {est}: {e}", tau.value())),
            }
        }
        if ok.is_empty() {
            continue;
        }
        for (j, name) in names.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|(v, _)| v[j]).collect();
            let ses: Vec<f64> = ok.iter().map(|(_, s)| s[j]).collect();
            let s = summarize(&vals, &ses, truth[j]);
            report.estimation.push(EstimationRow {
                dgp: cfg.dgp,
                case: cfg.case,
                n: cfg.n_subjects,
                tau: tau.value(),
                estimator: est.to_string(),
                parameter: name.clone(),
                truth: truth[j],
                bias: s.bias,
                sd: s.sd,
                ese: s.ese,
                mse: s.mse,
                covp: s.covp,
                completed: ok.len(),
                failures: reps - ok.len(),
            });
        }
    }
    Ok(report)
}

/// Slope changes for a sweep value: `β_k = ±b` with alternating signs.
fn sweep_beta(k: usize, b: f64) -> Vec<f64> {
    (0..k).map(|i| if i % 2 == 0 { b } else { -b }).collect()
}

/// Rejection rates of the kink test at level 0.05 over a grid of `β₁`
/// (`β₂ = −β₁`, ... when K > 1). All sweep values share the covariate and
/// error draws of each replication.
pub fn run_power_study(cfg: &DgpConfig, betas: &[f64], reps_null: usize, reps_alt: usize, b: usize) -> Result<ExperimentReport> {
    check_reps(reps_null)?;
    check_reps(reps_alt)?;
    if !betas.contains(&0.0) {
        return Err(MkqrError::Config("the beta grid must contain 0".into()));
    }
    let taus = levels(cfg)?;
    let k = cfg.k().max(1);
    let mut report = ExperimentReport::default();
    for &beta in betas {
        let mut c = cfg.clone();
        c.beta = sweep_beta(k, beta);
        c.validate()?;
        let reps = if beta == 0.0 { reps_null } else { reps_alt };
        let per_rep: Vec<Vec<std::result::Result<(bool, f64), String>>> = (0..reps)
            .into_par_iter()
            .map(|rep| {
                let data = match generate_rep(&c, rep as u64) {
                    Ok(d) => d,
                    Err(e) => return taus.iter().map(|_| Err(e.to_string())).collect(),
                };
                taus.iter()
                    .enumerate()
                    .map(|(ti, &tau)| {
                        let start = Instant::now();
                        let seed = mix_seed(c.seed, &[rep as u64, ti as u64, 0xb007]);
                        let res = TestGrid::default_for(&data)
                            .and_then(|grid| bootstrap_pvalue(&data, tau, &grid, b, seed))
                            .map_err(|e| e.to_string())?;
                        Ok((res.reject(LEVEL), start.elapsed().as_secs_f64()))
                    })
                    .collect()
            })
            .collect();
        for (ti, &tau) in taus.iter().enumerate() {
            let (mut rejections, mut completed, mut time) = (0usize, 0usize, 0.0);
            for (rep, r) in per_rep.iter().enumerate() {
                match &r[ti] {
                    Ok((rej, secs)) => {
                        rejections += *rej as usize;
                        completed += 1;
                        time += secs;
                    }
                    Err(e) => report.failures.push(format!("rep {rep}, tau {}, beta {beta}: {e}", tau.value())),
                }
            }
            report.power.push(PowerRow {
                dgp: c.dgp,
                case: c.case,
                k,
                n: c.n_subjects,
                tau: tau.value(),
                beta1: beta,
                rate: if completed > 0 { rejections as f64 / completed as f64 } else { f64::NAN },
                rejections,
                completed,
                failures: reps - completed,
                mean_time: if completed > 0 { time / completed as f64 } else { f64::NAN },
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dgp1(case: ErrorCase, n: usize) -> DgpConfig {
        DgpConfig::new(Dgp::Dgp1, case, vec![-2.0], vec![5.0], n, 11)
    }

    #[test]
    fn observation_count_is_8n() {
        for case in [ErrorCase::Cs, ErrorCase::Ar1, ErrorCase::Het] {
            let d = generate(&dgp1(case, 100)).unwrap();
            assert_eq!(d.n_obs(), 800);
            assert_eq!(d.n_subjects(), 100);
        }
    }

    #[test]
    fn cluster_size_census() {
        let d = generate(&dgp1(ErrorCase::Cs, 50)).unwrap();
        for m in 6..=10 {
            assert_eq!((0..d.n_subjects()).filter(|&i| d.cluster_size(i) == m).count(), 10);
        }
    }

    #[test]
    fn ar1_gaps_are_half() {
        let d = generate(&dgp1(ErrorCase::Ar1, 20)).unwrap();
        for i in 0..d.n_subjects() {
            let xs: Vec<f64> = d.rows(i).map(|r| d.x()[r]).collect();
            assert!(xs.windows(2).all(|w| (w[1] - w[0] - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn subject_count_must_divide_by_five() {
        assert!(matches!(generate(&dgp1(ErrorCase::Cs, 12)), Err(MkqrError::Config(_))));
    }

    #[test]
    fn reproducible() {
        let cfg = dgp1(ErrorCase::Het, 20);
        assert_eq!(generate_rep(&cfg, 3).unwrap(), generate_rep(&cfg, 3).unwrap());
        assert_ne!(generate_rep(&cfg, 3).unwrap(), generate_rep(&cfg, 4).unwrap());
    }

    #[test]
    fn dgp2_days_and_indicator() {
        let cfg = DgpConfig::new(Dgp::Dgp2, ErrorCase::Cs, vec![0.5, -0.5], vec![-1.0, 6.0], 50, 2);
        let d = generate(&cfg).unwrap();
        for i in 0..d.n_subjects() {
            let rows: Vec<usize> = d.rows(i).collect();
            let z0 = d.z_row(rows[0])[0];
            assert!(z0 == 0.0 || z0 == 1.0);
            for w in rows.windows(2) {
                assert_eq!(d.x()[w[1]] - d.x()[w[0]], 1.0);
                assert_eq!(d.z_row(w[1])[0], z0);
            }
            assert!(rows.iter().all(|&r| d.x()[r] >= -8.0 && d.x()[r] <= 15.0));
        }
    }

    #[test]
    fn kink_outside_covariate_range_rejected() {
        let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![1.0], vec![12.0], 10, 1);
        assert!(matches!(cfg.validate(), Err(MkqrError::Config(_))));
        let cfg = DgpConfig::new(Dgp::Dgp2, ErrorCase::Cs, vec![0.5, -0.5, 0.5], vec![-2.0, 4.0, 10.0], 10, 1);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn t3_cdf_reference() {
        assert!((t3_cdf(0.0) - 0.5).abs() < 1e-15);
        // P(T₃ ≤ 3.182446) = 0.975
        assert!((t3_cdf(3.182446305284263) - 0.975).abs() < 1e-9);
    }

    #[test]
    fn cs_quantile_symmetric_and_monotone() {
        assert!(cs_error_quantile(0.5).abs() < 1e-10);
        let q25 = cs_error_quantile(0.25);
        assert!((q25 + cs_error_quantile(0.75)).abs() < 1e-9);
        assert!(q25 < 0.0);
        assert!((cs_error_cdf(q25) - 0.25).abs() < 1e-10);
    }

    #[test]
    fn cs_quantile_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t3 = StudentT::new(3.0).unwrap();
        let mut draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                a + t3.sample(&mut rng)
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        for tau in [0.1, 0.25, 0.75] {
            let emp = crate::linalg::quantile_sorted(&draws, tau);
            assert!((emp - cs_error_quantile(tau)).abs() < 0.03, "{tau}: {emp}");
        }
    }

    #[test]
    fn generated_residual_quantile_matches_adjustment() {
        // β = 0 so the τ-quantile line is α₀ + q_τ + α₁x + γz
        let mut cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![], vec![], 12_500, 5);
        cfg.taus = vec![0.25];
        let d = generate(&cfg).unwrap();
        let th = cfg.theta_model().unwrap();
        let mut e: Vec<f64> = (0..d.n_obs()).map(|r| d.y()[r] - th.predict_unchecked(d.x()[r], d.z_row(r))).collect();
        e.sort_by(f64::total_cmp);
        let emp = crate::linalg::quantile_sorted(&e, 0.25);
        assert!((emp - cs_error_quantile(0.25)).abs() < 0.03);
    }

    #[test]
    fn heteroscedastic_quantile_line() {
        let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Het, vec![-2.0], vec![5.0], 20, 1);
        let th = cfg.theta_tau(QuantileLevel::new(0.9).unwrap()).unwrap();
        let c = norm_quantile(0.9);
        assert!((th.alpha0 - (1.0 + 3.2 * c)).abs() < 1e-12);
        assert!((th.alpha1 - (1.0 - 0.2 * c)).abs() < 1e-12);
        assert_eq!(th.t, vec![5.0]);
    }

    #[test]
    fn ar1_stationary_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = Normal::new(0.0, (1.0f64 / 0.75).sqrt()).unwrap();
        let draws: Vec<f64> = (0..100_000).map(|_| init.sample(&mut rng)).collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / draws.len() as f64;
        assert!((var - 4.0 / 3.0).abs() < 0.03);
    }

    #[test]
    fn progesterone_shape() {
        let d = progesterone_like(1, 1.0).unwrap();
        assert_eq!(d.n_subjects(), 91);
        assert!((0..91).all(|i| (9..=24).contains(&d.cluster_size(i))));
        let ones = (0..91).filter(|&i| d.z_row(d.rows(i).start)[0] == 1.0).count();
        assert_eq!(ones, 22);
        let (lo, hi) = d.support();
        assert!(lo >= -8.0 && hi <= 15.0);
    }

    #[test]
    fn summary_hand_values() {
        let s = summarize(&[1.0, 2.0, 3.0], &[1.0, 1.0, 0.1], 1.5);
        assert!((s.bias - 0.5).abs() < 1e-15);
        assert!((s.sd - 1.0).abs() < 1e-15);
        assert!((s.ese - 0.7).abs() < 1e-15);
        assert!((s.mse - (0.25 + 0.25 + 2.25) / 3.0).abs() < 1e-15);
        // |3 − 1.5| > 1.96 · 0.1
        assert_eq!(s.covp, Some(2.0 / 3.0));
        assert_eq!(summarize(&[1.0, 1.0], &[0.0, 0.0], 1.0).covp, None);
    }

    #[test]
    fn estimator_labels() {
        assert_eq!(Estimator::parse_for("wi", ErrorCase::Ar1).unwrap(), Estimator::Wi);
        assert_eq!(Estimator::parse_for("qif", ErrorCase::Ar1).unwrap(), Estimator::Qif(BasisKind::Ar1));
        assert_eq!(Estimator::parse_for("WC", ErrorCase::Cs).unwrap(), Estimator::Qif(BasisKind::Cs));
        assert_eq!(Estimator::parse_for("qif:identity", ErrorCase::Cs).unwrap(), Estimator::Qif(BasisKind::Identity));
        assert!(Estimator::parse_for("ols", ErrorCase::Cs).is_err());
        assert_eq!(Estimator::Qif(BasisKind::Cs).to_string(), "WC(CS-2)");
    }

    #[test]
    fn study_preconditions() {
        let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![0.0], vec![5.0], 20, 1);
        assert!(run_power_study(&cfg, &[0.1, 0.3], 2, 2, 10).is_err());
        assert!(run_selection_study(&cfg, 0, 2, &[Estimator::Wi]).is_err());
        let two = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![-2.0, 2.0], vec![3.0, 6.0], 20, 1);
        assert!(run_selection_study(&two, 2, 1, &[Estimator::Wi]).is_err());
    }

    #[test]
    fn zero_truth_selection_counts_k0() {
        let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Cs, vec![], vec![], 20, 5);
        let r = run_selection_study(&cfg, 3, 1, &[Estimator::Wi]).unwrap();
        let row = &r.selection[0];
        assert_eq!(row.k, 0);
        assert_eq!(row.counts.iter().sum::<usize>(), row.completed);
        assert!((row.rate - row.counts[0] as f64 / row.completed as f64).abs() < 1e-15);
    }

    #[test]
    fn studies_are_reproducible() {
        let cfg = DgpConfig::new(Dgp::Dgp1, ErrorCase::Ar1, vec![-2.0], vec![5.0], 20, 9);
        let a = run_estimation_study(&cfg, 3, &[Estimator::Wi, Estimator::Qif(BasisKind::Ar1)]).unwrap();
        let b = run_estimation_study(&cfg, 3, &[Estimator::Wi, Estimator::Qif(BasisKind::Ar1)]).unwrap();
        assert_eq!(a, b);
        let p1 = run_power_study(&cfg, &[0.0, 0.5], 3, 3, 20).unwrap();
        let p2 = run_power_study(&cfg, &[0.0, 0.5], 3, 3, 20).unwrap();
        let strip = |r: &ExperimentReport| r.power.iter().map(|p| (p.rejections, p.completed)).collect::<Vec<_>>();
        assert_eq!(strip(&p1), strip(&p2));
    }

    proptest::proptest! {
        #[test]
        fn mse_decomposition(vals in proptest::collection::vec(-5.0..5.0f64, 2..40), truth in -3.0..3.0f64) {
            let se = vec![0.5; vals.len()];
            let s = summarize(&vals, &se, truth);
            let r = vals.len() as f64;
            let rhs = s.bias * s.bias + s.sd * s.sd * (r - 1.0) / r;
            proptest::prop_assert!((s.mse - rhs).abs() < 1e-10);
            proptest::prop_assert!(s.mse >= s.bias * s.bias - 1e-10);
            let c = s.covp.unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
