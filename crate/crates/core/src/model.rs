//! Domain types and the multi-kink conditional quantile function.
//!
//! The conditional τ-quantile of `y` given `(x, z)` is
//!
//! ```text
//! Q(τ; θ | x, z) = α₀ + α₁·x + Σ_k β_k·(x − t_k)₊ + zᵀγ
//! ```
//!
//! with kink locations `t₁ < … < t_K`. Parameter vectors are always laid out
//! as `(α₀, α₁, β₁..β_K, γ₁..γ_p, t₁..t_K)`.

use serde::{Deserialize, Serialize};

use crate::error::{MkqrError, Result};

/// A quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(MkqrError::Validation(format!(
                "quantile level must lie in (0, 1), got {tau}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = MkqrError;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

/// Quantile check loss `ρ_τ(v) = v·(τ − 1{v<0})`.
#[inline]
pub fn check_loss(v: f64, tau: QuantileLevel) -> f64 {
    let t = tau.0;
    if v < 0.0 {
        v * (t - 1.0)
    } else {
        v * t
    }
}

/// Quantile score `ψ_τ(u) = τ − 1{u<0}`, with `ψ_τ(0) = τ`.
#[inline]
pub fn psi(u: f64, tau: QuantileLevel) -> f64 {
    if u < 0.0 {
        tau.0 - 1.0
    } else {
        tau.0
    }
}

/// One measurement `(y, x, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub x: f64,
    pub z: Vec<f64>,
}

/// All measurements of one subject (cluster).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub obs: Vec<Observation>,
}

/// Clustered observations stored column-wise.
///
/// Observations of subject `i` occupy rows `offsets[i]..offsets[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    ids: Vec<String>,
    offsets: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    p: usize,
    x_min: f64,
    x_max: f64,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(MkqrError::Validation("dataset has no subjects".into()));
        }
        let p = subjects[0]
            .obs
            .first()
            .map(|o| o.z.len())
            .ok_or_else(|| MkqrError::Validation(format!("subject '{}' has no observations", subjects[0].id)))?;
        let n: usize = subjects.iter().map(|s| s.obs.len()).sum();
        let mut ids = Vec::with_capacity(subjects.len());
        let mut offsets = Vec::with_capacity(subjects.len() + 1);
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n * p);
        offsets.push(0);
        for s in subjects {
            if s.obs.is_empty() {
                return Err(MkqrError::Validation(format!("subject '{}' has no observations", s.id)));
            }
            for o in &s.obs {
                if o.z.len() != p {
                    return Err(MkqrError::DimensionMismatch {
                        expected: p,
                        found: o.z.len(),
                        context: "covariate vector length",
                    });
                }
                if !o.y.is_finite() || !o.x.is_finite() || o.z.iter().any(|v| !v.is_finite()) {
                    return Err(MkqrError::Validation(format!(
                        "non-finite value in subject '{}'",
                        s.id
                    )));
                }
                x.push(o.x);
                y.push(o.y);
                z.extend_from_slice(&o.z);
            }
            ids.push(s.id);
            offsets.push(x.len());
        }
        let x_min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let x_max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(x_min < x_max) {
            return Err(MkqrError::Validation(
                "threshold covariate x must take at least two distinct values".into(),
            ));
        }
        Ok(Self { ids, offsets, x, y, z, p, x_min, x_max })
    }

    /// Number of subjects `N`.
    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    /// Total number of observations `n`.
    pub fn n_obs(&self) -> usize {
        self.x.len()
    }

    /// Number of additional covariates `p`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Support bounds `(M1, M2)` of the threshold covariate.
    pub fn support(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row range of subject `i`.
    pub fn rows(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn cluster_size(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Covariates of row `r`.
    #[inline]
    pub fn z_row(&self, r: usize) -> &[f64] {
        &self.z[r * self.p..(r + 1) * self.p]
    }

    /// Subject index owning each row.
    pub fn row_subjects(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_obs());
        for i in 0..self.n_subjects() {
            out.extend(std::iter::repeat_n(i, self.cluster_size(i)));
        }
        out
    }

    pub fn to_subjects(&self) -> Vec<Subject> {
        (0..self.n_subjects())
            .map(|i| Subject {
                id: self.ids[i].clone(),
                obs: self
                    .rows(i)
                    .map(|r| Observation { y: self.y[r], x: self.x[r], z: self.z_row(r).to_vec() })
                    .collect(),
            })
            .collect()
    }

    /// Copy of the dataset with responses replaced.
    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(MkqrError::DimensionMismatch {
                expected: self.n_obs(),
                found: y.len(),
                context: "response vector",
            });
        }
        Ok(Self { y, ..self.clone() })
    }
}

/// Full parameter vector θ = (η, t) of a K-kink model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub t: Vec<f64>,
}

impl ThetaParams {
    pub fn new(alpha0: f64, alpha1: f64, beta: Vec<f64>, gamma: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if beta.len() != t.len() {
            return Err(MkqrError::DimensionMismatch {
                expected: t.len(),
                found: beta.len(),
                context: "number of slope changes vs kink locations",
            });
        }
        if t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MkqrError::Validation("kink locations must be strictly increasing".into()));
        }
        Ok(Self { alpha0, alpha1, beta, gamma, t })
    }

    /// Number of kinks `K`.
    pub fn k(&self) -> usize {
        self.t.len()
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    /// Length `2 + p + 2K` of the full parameter vector.
    pub fn dim(&self) -> usize {
        2 + self.p() + 2 * self.k()
    }

    /// Flatten in the layout `(α₀, α₁, β, γ, t)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.alpha0);
        v.push(self.alpha1);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.gamma);
        v.extend_from_slice(&self.t);
        v
    }

    pub fn from_slice(k: usize, p: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 2 + p + 2 * k {
            return Err(MkqrError::DimensionMismatch {
                expected: 2 + p + 2 * k,
                found: v.len(),
                context: "flattened parameter vector",
            });
        }
        Ok(Self {
            alpha0: v[0],
            alpha1: v[1],
            beta: v[2..2 + k].to_vec(),
            gamma: v[2 + k..2 + k + p].to_vec(),
            t: v[2 + k + p..].to_vec(),
        })
    }

    /// Regression coefficients η = (α₀, α₁, β, γ).
    pub fn eta(&self) -> Vec<f64> {
        let mut v = self.to_vec();
        v.truncate(2 + self.k() + self.p());
        v
    }

    /// Rebuild from η and kink locations.
    pub fn from_eta(eta: &[f64], t: &[f64]) -> Result<Self> {
        let k = t.len();
        if eta.len() < 2 + k {
            return Err(MkqrError::DimensionMismatch {
                expected: 2 + k,
                found: eta.len(),
                context: "regression coefficient vector",
            });
        }
        let p = eta.len() - 2 - k;
        let mut v = eta.to_vec();
        v.extend_from_slice(t);
        Self::from_slice(k, p, &v)
    }

    /// Parameter names in layout order.
    pub fn names(k: usize, p: usize) -> Vec<String> {
        let mut n = vec!["alpha0".to_string(), "alpha1".to_string()];
        n.extend((1..=k).map(|i| format!("beta{i}")));
        n.extend((1..=p).map(|i| format!("gamma{i}")));
        n.extend((1..=k).map(|i| format!("t{i}")));
        n
    }

    /// Check `M1 + ε ≤ t₁ < … < t_K ≤ M2 − ε`.
    pub fn check_feasible(&self, support: (f64, f64), edge: f64) -> Result<()> {
        let (lo, hi) = (support.0 + edge, support.1 - edge);
        if self.t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MkqrError::Validation("kink locations must be strictly increasing".into()));
        }
        if let (Some(&first), Some(&last)) = (self.t.first(), self.t.last()) {
            if first < lo || last > hi {
                return Err(MkqrError::Validation(format!(
                    "kink locations must lie in [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.gamma.len() {
            return Err(MkqrError::DimensionMismatch {
                expected: self.gamma.len(),
                found: z.len(),
                context: "covariate vector vs gamma",
            });
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn predict_unchecked(&self, x: f64, z: &[f64]) -> f64 {
        let mut q = self.alpha0 + self.alpha1 * x;
        for (b, t) in self.beta.iter().zip(&self.t) {
            if x > *t {
                q += b * (x - t);
            }
        }
        q + z.iter().zip(&self.gamma).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Conditional quantile `Q(τ; θ | x, z)`.
    pub fn predict(&self, x: f64, z: &[f64]) -> Result<f64> {
        self.check_z(z)?;
        Ok(self.predict_unchecked(x, z))
    }

    /// Writes `𝒳(θ) = (1, x, (x−t_k)₊, z, −β_k·1{x>t_k})` into `out`.
    #[inline]
    pub(crate) fn design_into(&self, x: f64, z: &[f64], out: &mut [f64]) {
        let k = self.k();
        let p = self.p();
        out[0] = 1.0;
        out[1] = x;
        for j in 0..k {
            let above = x > self.t[j];
            out[2 + j] = if above { x - self.t[j] } else { 0.0 };
            out[2 + k + p + j] = if above { -self.beta[j] } else { 0.0 };
        }
        out[2 + k..2 + k + p].copy_from_slice(z);
    }

    /// Gradient of the conditional quantile with respect to θ (a.e. in x).
    pub fn design_vector(&self, x: f64, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let mut out = vec![0.0; self.dim()];
        self.design_into(x, z, &mut out);
        Ok(out)
    }
}

/// Free-function form of [`ThetaParams::predict`].
pub fn quantile_predict(theta: &ThetaParams, x: f64, z: &[f64]) -> Result<f64> {
    theta.predict(x, z)
}

/// Free-function form of [`ThetaParams::design_vector`].
pub fn design_vector(theta: &ThetaParams, x: f64, z: &[f64]) -> Result<Vec<f64>> {
    theta.design_vector(x, z)
}

/// Mean check loss `S_n(θ)` over all observations.
pub fn objective_sn(data: &LongitudinalDataset, theta: &ThetaParams, tau: QuantileLevel) -> Result<f64> {
    if theta.p() != data.p() {
        return Err(MkqrError::DimensionMismatch {
            expected: data.p(),
            found: theta.p(),
            context: "gamma length vs dataset covariates",
        });
    }
    let n = data.n_obs();
    let total: f64 = (0..n)
        .map(|r| check_loss(data.y()[r] - theta.predict_unchecked(data.x()[r], data.z_row(r)), tau))
        .sum();
    Ok(total / n as f64)
}

/// Residuals `y − Q(τ; θ | x, z)` in row order.
pub fn residuals(data: &LongitudinalDataset, theta: &ThetaParams) -> Vec<f64> {
    (0..data.n_obs())
        .map(|r| data.y()[r] - theta.predict_unchecked(data.x()[r], data.z_row(r)))
        .collect()
}
