//! Long-format panel CSV, report bundles and experiment configs.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MkqrError, Result};
use crate::kink_test::{bootstrap_pvalue, KinkTestResult, TestGrid};
use crate::model::{LongitudinalDataset, Observation, QuantileLevel, Subject, ThetaParams};
use crate::qif::{fit_qif_from_wi, select_k_qif, BasisKind};
use crate::seed::mix_seed;
use crate::sim::{Dgp, DgpConfig, ErrorCase, Estimator, ExperimentReport};
use crate::wi::{profile_fit_wi, select_k_wi, FitResult, Method, WiFitConfig};

/// Column layout of the input panel.
#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Covariate columns by header name. Without a header row every column
    /// after `subject_id, x, y` is a covariate and this must be empty.
    pub z_cols: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PanelRead {
    pub data: LongitudinalDataset,
    pub z_names: Vec<String>,
    /// Data rows in the file (header excluded).
    pub rows_in: usize,
    /// Rows dropped for missing or non-finite values.
    pub dropped: usize,
}

const ID_NAMES: [&str; 4] = ["subject_id", "subject", "id", "cluster"];

fn is_missing(field: &str) -> bool {
    matches!(field.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "." | "null" | "inf" | "-inf" | "+inf" | "infinity" | "-infinity")
}

fn schema(line: usize, message: impl Into<String>) -> MkqrError {
    MkqrError::Schema { line, message: message.into() }
}

/// Read a long-format panel: one row per observation with columns
/// `subject_id, x, y` plus declared covariates. The header row is optional
/// and detected by a non-numeric `x` or `y` field in the first record.
pub fn read_panel<R: Read>(reader: R, opts: &CsvOptions) -> Result<PanelRead> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut records = rdr.records();
    let first = match records.next() {
        Some(r) => r.map_err(|e| schema(1, e.to_string()))?,
        None => return Err(schema(1, "file is empty")),
    };
    let looks_numeric = |s: &str| is_missing(s) || s.parse::<f64>().is_ok();
    let header = first.len() < 3 || !(looks_numeric(&first[1]) && looks_numeric(&first[2]));
    let (idx_id, idx_x, idx_y, idx_z, z_names, width) = if header {
        let names: Vec<String> = first.iter().map(|s| s.to_string()).collect();
        let find = |want: &[&str], what: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| want.iter().any(|w| n.eq_ignore_ascii_case(w)))
                .ok_or_else(|| schema(1, format!("header has no {what} column")))
        };
        let id = find(&ID_NAMES, "subject_id")?;
        let x = find(&["x"], "x")?;
        let y = find(&["y"], "y")?;
        let mut zi = Vec::with_capacity(opts.z_cols.len());
        for z in &opts.z_cols {
            zi.push(names.iter().position(|n| n == z).ok_or_else(|| schema(1, format!("covariate column '{z}' not in header")))?);
        }
        (id, x, y, zi, opts.z_cols.clone(), names.len())
    } else {
        if !opts.z_cols.is_empty() {
            return Err(MkqrError::Config("named covariate columns require a header row".into()));
        }
        let w = first.len();
        let zi: Vec<usize> = (3..w).collect();
        let zn = (1..=zi.len()).map(|j| format!("z{j}")).collect();
        (0, 1, 2, zi, zn, w)
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Observation>> = HashMap::new();
    let (mut rows_in, mut dropped) = (0usize, 0usize);
    let mut handle = |rec: &csv::StringRecord, line: usize| -> Result<()> {
        rows_in += 1;
        if rec.len() != width {
            return Err(schema(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let id = rec[idx_id].to_string();
        if id.is_empty() {
            return Err(schema(line, "empty subject_id"));
        }
        let num = |i: usize, name: &str| -> Result<Option<f64>> {
            let f = &rec[i];
            if is_missing(f) {
                return Ok(None);
            }
            let v: f64 = f.parse().map_err(|_| schema(line, format!("column {name}: '{f}' is not a number")))?;
            Ok(v.is_finite().then_some(v))
        };
        let x = num(idx_x, "x")?;
        let y = num(idx_y, "y")?;
        let mut z = Vec::with_capacity(idx_z.len());
        let mut complete = x.is_some() && y.is_some();
        for (&i, name) in idx_z.iter().zip(&z_names) {
            match num(i, name)? {
                Some(v) => z.push(v),
                None => complete = false,
            }
        }
        if !complete {
            dropped += 1;
            return Ok(());
        }
        let obs = Observation { y: y.unwrap_or_default(), x: x.unwrap_or_default(), z };
        match groups.get_mut(&id) {
            Some(g) => g.push(obs),
            None => {
                order.push(id.clone());
                groups.insert(id, vec![obs]);
            }
        }
        Ok(())
    };
    if !header {
        handle(&first, 1)?;
    }
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| schema(line, e.to_string()))?;
        handle(&rec, line)?;
    }
    if order.is_empty() {
        return Err(MkqrError::Validation("no complete observations".into()));
    }
    let subjects = order
        .into_iter()
        .map(|id| {
            let obs = groups.remove(&id).unwrap_or_default();
            Subject { id, obs }
        })
        .collect();
    Ok(PanelRead { data: LongitudinalDataset::new(subjects)?, z_names, rows_in, dropped })
}

pub fn read_panel_file(path: &Path, opts: &CsvOptions) -> Result<PanelRead> {
    read_panel(std::fs::File::open(path)?, opts)
}

fn csv_err(e: csv::Error) -> MkqrError {
    MkqrError::Io(std::io::Error::other(e))
}

/// Write a panel with a header row; floats use the shortest form that
/// parses back to the same value.
pub fn write_panel<W: Write>(data: &LongitudinalDataset, z_names: &[String], w: W) -> Result<()> {
    if z_names.len() != data.p() {
        return Err(MkqrError::DimensionMismatch { expected: data.p(), found: z_names.len(), context: "covariate names" });
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["subject_id".to_string(), "x".into(), "y".into()];
    head.extend(z_names.iter().cloned());
    wr.write_record(&head).map_err(csv_err)?;
    for (i, id) in data.ids().iter().enumerate() {
        for r in data.rows(i) {
            let mut rec = vec![id.clone(), data.x()[r].to_string(), data.y()[r].to_string()];
            rec.extend(data.z_row(r).iter().map(|v| v.to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub n_subjects: usize,
    pub n_obs: usize,
    pub rows_in: usize,
    pub dropped_rows: usize,
    pub z_names: Vec<String>,
}

impl RunMeta {
    pub fn new(command: &str, seed: u64, input: Option<String>, read: &PanelRead) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            input,
            n_subjects: read.data.n_subjects(),
            n_obs: read.data.n_obs(),
            rows_in: read.rows_in,
            dropped_rows: read.dropped,
            z_names: read.z_names.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SicEntry {
    pub k: usize,
    pub objective: Option<f64>,
    pub sic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Estimate at one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBlock {
    pub tau: f64,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    /// Kink count was chosen by SIC.
    pub k_auto: bool,
    pub k_hat: usize,
    pub parameter_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sic_table: Vec<SicEntry>,
    pub fit: FitResult,
}

/// Fitted quantile curves at `z = 0` over the observed range of X.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub x: Vec<f64>,
    pub taus: Vec<f64>,
    /// `values[j][g]`: curve `j` at `x[g]`.
    pub values: Vec<Vec<f64>>,
}

/// Number of points in the curve table.
pub const CURVE_POINTS: usize = 101;

impl CurveTable {
    pub fn from_fits(data: &LongitudinalDataset, fits: &[FitBlock]) -> Self {
        let (lo, hi) = data.support();
        let x: Vec<f64> = (0..CURVE_POINTS)
            .map(|g| if g + 1 == CURVE_POINTS { hi } else { lo + (hi - lo) * g as f64 / (CURVE_POINTS - 1) as f64 })
            .collect();
        let z = vec![0.0; data.p()];
        let values = fits.iter().map(|f| x.iter().map(|&v| f.fit.theta.predict_unchecked(v, &z)).collect()).collect();
        Self { x, taus: fits.iter().map(|f| f.tau).collect(), values }
    }
}

/// Everything a command produces. Timings are left out so that reruns are
/// byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub meta: RunMeta,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fits: Vec<FitBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<KinkTestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurveTable>,
}

impl ReportBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Write `report.json` plus the CSV tables that apply.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut written = vec!["report.json".to_string()];
        std::fs::write(dir.join("report.json"), self.to_json()? + "\n")?;
        if !self.fits.is_empty() {
            write_fit_csv(&self.fits, std::fs::File::create(dir.join("fit.csv"))?)?;
            written.push("fit.csv".into());
            if self.fits.iter().any(|f| !f.sic_table.is_empty()) {
                write_sic_csv(&self.fits, std::fs::File::create(dir.join("sic.csv"))?)?;
                written.push("sic.csv".into());
            }
        }
        if let Some(c) = &self.curves {
            write_curves_csv(c, std::fs::File::create(dir.join("curves.csv"))?)?;
            written.push("curves.csv".into());
        }
        if !self.tests.is_empty() {
            write_test_csv(&self.tests, self.meta.seed, std::fs::File::create(dir.join("test.csv"))?)?;
            written.push("test.csv".into());
        }
        Ok(written)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

pub fn write_fit_csv<W: Write>(fits: &[FitBlock], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["tau", "method", "k", "parameter", "estimate", "se", "ci_lower", "ci_upper", "converged"]).map_err(csv_err)?;
    for f in fits {
        let est = f.fit.theta.to_vec();
        for (j, name) in f.parameter_names.iter().enumerate() {
            wr.write_record([
                f.tau.to_string(),
                f.method.to_string(),
                f.k_hat.to_string(),
                name.clone(),
                est[j].to_string(),
                f.fit.se[j].to_string(),
                f.fit.ci95[j][0].to_string(),
                f.fit.ci95[j][1].to_string(),
                f.fit.converged.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_sic_csv<W: Write>(fits: &[FitBlock], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["tau", "method", "k", "objective", "sic", "selected"]).map_err(csv_err)?;
    for f in fits {
        for e in &f.sic_table {
            wr.write_record([
                f.tau.to_string(),
                f.method.to_string(),
                e.k.to_string(),
                opt(e.objective),
                opt(e.sic),
                (e.k == f.k_hat).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(c: &CurveTable, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["x".to_string()];
    head.extend(c.taus.iter().map(|t| format!("q_{t}")));
    wr.write_record(&head).map_err(csv_err)?;
    for (g, x) in c.x.iter().enumerate() {
        let mut rec = vec![x.to_string()];
        rec.extend(c.values.iter().map(|v| v[g].to_string()));
        wr.write_record(&rec).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_test_csv<W: Write>(tests: &[KinkTestResult], seed: u64, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["tau", "statistic", "p_value", "B", "grid_lo", "grid_hi", "grid_size", "seed"]).map_err(csv_err)?;
    for t in tests {
        let g = t.grid.points();
        wr.write_record([
            t.tau.value().to_string(),
            t.t_n.to_string(),
            t.p_value.to_string(),
            t.b.to_string(),
            g[0].to_string(),
            g[g.len() - 1].to_string(),
            g.len().to_string(),
            seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// Write the study tables that are non-empty; returns the file names.
pub fn write_experiment(report: &ExperimentReport, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if !report.selection.is_empty() {
        let mut wr = csv::Writer::from_path(dir.join("selection.csv")).map_err(csv_err)?;
        wr.write_record(["K", "N", "case", "tau", "estimator", "rate", "time", "dgp", "completed", "failures"]).map_err(csv_err)?;
        for r in &report.selection {
            wr.write_record([
                r.k.to_string(),
                r.n.to_string(),
                r.case.to_string(),
                r.tau.to_string(),
                r.estimator.clone(),
                r.rate.to_string(),
                r.mean_time.to_string(),
                r.dgp.to_string(),
                r.completed.to_string(),
                r.failures.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        written.push("selection.csv".into());
    }
    if !report.estimation.is_empty() {
        let mut wr = csv::Writer::from_path(dir.join("estimation.csv")).map_err(csv_err)?;
        wr.write_record(["dgp", "case", "N", "tau", "estimator", "parameter", "truth", "Bias", "SD", "ESE", "MSE", "CovP", "completed", "failures"])
            .map_err(csv_err)?;
        for r in &report.estimation {
            wr.write_record([
                r.dgp.to_string(),
                r.case.to_string(),
                r.n.to_string(),
                r.tau.to_string(),
                r.estimator.clone(),
                r.parameter.clone(),
                r.truth.to_string(),
                r.bias.to_string(),
                r.sd.to_string(),
                r.ese.to_string(),
                r.mse.to_string(),
                opt(r.covp),
                r.completed.to_string(),
                r.failures.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        written.push("estimation.csv".into());
    }
    if !report.power.is_empty() {
        let mut wr = csv::Writer::from_path(dir.join("power.csv")).map_err(csv_err)?;
        wr.write_record(["tau", "beta1", "rate", "dgp", "case", "K", "N", "rejections", "completed", "failures", "time"]).map_err(csv_err)?;
        for r in &report.power {
            wr.write_record([
                r.tau.to_string(),
                r.beta1.to_string(),
                r.rate.to_string(),
                r.dgp.to_string(),
                r.case.to_string(),
                r.k.to_string(),
                r.n.to_string(),
                r.rejections.to_string(),
                r.completed.to_string(),
                r.failures.to_string(),
                r.mean_time.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        written.push("power.csv".into());
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StudyKind {
    Selection,
    Estimation,
    Power,
}

/// Monte Carlo experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    pub dgp: Dgp,
    pub cases: Vec<ErrorCase>,
    pub ns: Vec<usize>,
    pub beta: Vec<f64>,
    pub t: Vec<f64>,
    pub taus: Vec<f64>,
    pub seed: u64,
    pub reps: usize,
    pub full_reps: usize,
    pub kmax: usize,
    /// Estimator labels, resolved per error case.
    pub estimators: Vec<String>,
    pub betas: Vec<f64>,
    pub reps_null: usize,
    pub reps_alt: usize,
    pub full_reps_null: usize,
    pub full_reps_alt: usize,
    pub b: usize,
}

const CONFIG_KEYS: [&str; 18] = [
    "study", "dgp", "case", "n", "beta", "t", "tau", "seed", "reps", "full_reps", "kmax", "estimators", "betas", "reps_null", "reps_alt",
    "full_reps_null", "full_reps_alt", "b",
];

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| MkqrError::Config(format!("key '{key}': cannot parse '{s}'"))))
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| MkqrError::Config(format!("key '{key}': cannot parse '{}'", v.trim())))
}

impl ExperimentConfig {
    /// Parse `key = value` lines; `#` starts a comment and lists are
    /// comma separated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MkqrError::Config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim().to_ascii_lowercase();
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(MkqrError::Config(format!("line {}: unknown key '{k}'", no + 1)));
            }
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(MkqrError::Config(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);
        let need = |k: &str| get(k).ok_or_else(|| MkqrError::Config(format!("missing key '{k}'")));
        let study = match need("study")?.to_ascii_lowercase().as_str() {
            "selection" => StudyKind::Selection,
            "estimation" => StudyKind::Estimation,
            "power" => StudyKind::Power,
            other => return Err(MkqrError::Config(format!("key 'study': unknown study '{other}'"))),
        };
        let usize_or = |k: &str, d: usize| -> Result<usize> { get(k).map(|v| parse_one(k, v)).unwrap_or(Ok(d)) };
        let reps = usize_or("reps", 100)?;
        let reps_null = usize_or("reps_null", reps)?;
        let reps_alt = usize_or("reps_alt", reps)?;
        let cfg = Self {
            study,
            dgp: parse_one("dgp", need("dgp")?)?,
            cases: parse_list("case", need("case")?)?,
            ns: parse_list("n", need("n")?)?,
            beta: get("beta").map(|v| parse_list("beta", v)).transpose()?.unwrap_or_default(),
            t: parse_list("t", need("t")?)?,
            taus: get("tau").map(|v| parse_list("tau", v)).transpose()?.unwrap_or_else(|| vec![0.5]),
            seed: get("seed").map(|v| parse_one("seed", v)).transpose()?.unwrap_or(1),
            reps,
            full_reps: usize_or("full_reps", reps)?,
            kmax: usize_or("kmax", 3)?,
            estimators: get("estimators").map(|v| parse_list("estimators", v)).transpose()?.unwrap_or_else(|| vec!["wi".into()]),
            betas: get("betas").map(|v| parse_list("betas", v)).transpose()?.unwrap_or_default(),
            reps_null,
            reps_alt,
            full_reps_null: usize_or("full_reps_null", reps_null)?,
            full_reps_alt: usize_or("full_reps_alt", reps_alt)?,
            b: usize_or("b", 300)?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.cases.is_empty() || self.ns.is_empty() {
            return Err(MkqrError::Config("keys 'case' and 'n' need at least one value".into()));
        }
        match self.study {
            StudyKind::Power => {
                if self.betas.is_empty() {
                    return Err(MkqrError::Config("missing key 'betas'".into()));
                }
                if self.t.is_empty() {
                    return Err(MkqrError::Config("key 't': power studies need at least one kink location".into()));
                }
            }
            _ => {
                if self.beta.len() != self.t.len() {
                    return Err(MkqrError::Config("keys 'beta' and 't' must have the same length".into()));
                }
            }
        }
        for &case in &self.cases {
            for e in &self.estimators {
                Estimator::parse_for(e, case)?;
            }
            for &n in &self.ns {
                self.dgp_config(case, n).validate()?;
            }
        }
        Ok(())
    }

    pub fn dgp_config(&self, case: ErrorCase, n: usize) -> DgpConfig {
        let beta = if self.study == StudyKind::Power { vec![0.0; self.t.len()] } else { self.beta.clone() };
        let mut c = DgpConfig::new(self.dgp, case, beta, self.t.clone(), n, self.seed);
        c.taus = self.taus.clone();
        c
    }

    /// Run every (case, N) cell and concatenate the reports.
    pub fn run(&self, full_scale: bool) -> Result<ExperimentReport> {
        let mut out = ExperimentReport::default();
        for &case in &self.cases {
            let ests: Vec<Estimator> = self.estimators.iter().map(|e| Estimator::parse_for(e, case)).collect::<Result<_>>()?;
            for &n in &self.ns {
                let cfg = self.dgp_config(case, n);
                let r = match self.study {
                    StudyKind::Selection => {
                        crate::sim::run_selection_study(&cfg, if full_scale { self.full_reps } else { self.reps }, self.kmax, &ests)?
                    }
                    StudyKind::Estimation => crate::sim::run_estimation_study(&cfg, if full_scale { self.full_reps } else { self.reps }, &ests)?,
                    StudyKind::Power => {
                        let (rn, ra) = if full_scale { (self.full_reps_null, self.full_reps_alt) } else { (self.reps_null, self.reps_alt) };
                        crate::sim::run_power_study(&cfg, &self.betas, rn, ra, self.b)?
                    }
                };
                out.selection.extend(r.selection);
                out.estimation.extend(r.estimation);
                out.power.extend(r.power);
                out.failures.extend(r.failures);
            }
        }
        Ok(out)
    }
}

/// Experiment configs shipped with the binary.
pub fn bundled_config(name: &str) -> Option<&'static str> {
    match name {
        "table1-desk" => Some(include_str!("../configs/table1-desk.conf")),
        "table2-desk" => Some(include_str!("../configs/table2-desk.conf")),
        "power-desk" => Some(include_str!("../configs/power-desk.conf")),
        _ => None,
    }
}

pub const BUNDLED_CONFIGS: [&str; 3] = ["table1-desk", "table2-desk", "power-desk"];

/// Kink count requested for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    /// Choose by SIC over `0..=kmax`.
    Auto { kmax: usize },
    Fixed(usize),
}

impl std::str::FromStr for KChoice {
    type Err = MkqrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(KChoice::Auto { kmax: 3 }),
            v => v.parse().map(KChoice::Fixed).map_err(|_| MkqrError::Config(format!("k must be 'auto' or a count, got '{s}'"))),
        }
    }
}

/// Fit every quantile level independently.
pub fn fit_levels(data: &LongitudinalDataset, taus: &[f64], method: Method, basis: BasisKind, k: KChoice) -> Result<Vec<FitBlock>> {
    if taus.is_empty() {
        return Err(MkqrError::Config("at least one quantile level is required".into()));
    }
    let mut out = Vec::with_capacity(taus.len());
    for &t in taus {
        let tau = QuantileLevel::new(t).map_err(|e| MkqrError::Config(e.to_string()))?;
        let base = WiFitConfig::new(tau, 0);
        let (fit, sic_table, k_auto) = match k {
            KChoice::Auto { kmax } => {
                let sel = match method {
                    Method::Wi => select_k_wi(data, &base, kmax)?,
                    Method::Qif => select_k_qif(data, &base, basis, kmax)?,
                };
                let table = sel
                    .candidates
                    .iter()
                    .map(|c| SicEntry {
                        k: c.k,
                        objective: c.fit.as_ref().map(|f| f.objective),
                        sic: c.fit.as_ref().map(|f| f.sic),
                        error: c.error.clone(),
                    })
                    .collect();
                (sel.chosen().clone(), table, true)
            }
            KChoice::Fixed(kk) => {
                let cfg = WiFitConfig { k: kk, ..base };
                let fit = match method {
                    Method::Wi => profile_fit_wi(data, &cfg)?,
                    Method::Qif => fit_qif_from_wi(data, &cfg, basis)?,
                };
                (fit, Vec::new(), false)
            }
        };
        out.push(FitBlock {
            tau: t,
            method,
            basis: (method == Method::Qif).then(|| basis.to_string()),
            k_auto,
            k_hat: fit.k,
            parameter_names: ThetaParams::names(fit.k, data.p()),
            sic_table,
            fit,
        });
    }
    Ok(out)
}

/// Kink test at every quantile level; level `j` uses multiplier stream
/// `mix_seed(seed, [j])`.
pub fn test_levels(data: &LongitudinalDataset, taus: &[f64], b: usize, seed: u64, grid_size: usize) -> Result<Vec<KinkTestResult>> {
    if taus.is_empty() {
        return Err(MkqrError::Config("at least one quantile level is required".into()));
    }
    let grid = TestGrid::quantile_span(data, grid_size, 0.1, 0.9)?;
    taus.iter()
        .enumerate()
        .map(|(j, &t)| {
            let tau = QuantileLevel::new(t).map_err(|e| MkqrError::Config(e.to_string()))?;
            bootstrap_pvalue(data, tau, &grid, b, mix_seed(seed, &[j as u64]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str, z: &[&str]) -> Result<PanelRead> {
        read_panel(s.as_bytes(), &CsvOptions { z_cols: z.iter().map(|s| s.to_string()).collect() })
    }

    #[test]
    fn header_and_grouping_by_first_appearance() {
        let r = read("subject_id,x,y,cond\nb,1,2,0\na,2,3,1\nb,3,4,0\n", &["cond"]).unwrap();
        assert_eq!(r.data.ids(), &["b".to_string(), "a".to_string()]);
        assert_eq!(r.data.cluster_size(0), 2);
        assert_eq!(r.data.x(), &[1.0, 3.0, 2.0]);
        assert_eq!(r.z_names, vec!["cond".to_string()]);
        assert_eq!((r.rows_in, r.dropped), (3, 0));
    }

    #[test]
    fn headerless_uses_positions() {
        let r = read("s1,0.5,1.5,1\ns1,1.5,2.5,0\n", &[]).unwrap();
        assert_eq!(r.data.p(), 1);
        assert_eq!(r.data.n_obs(), 2);
        assert!(read("s1,0.5,1.5,1\n", &["z"]).is_err());
    }

    #[test]
    fn missing_values_dropped_and_counted() {
        let r = read("id,x,y\na,1,NA\na,2,3\nb,,4\nb,3,inf\nb,4,5\n", &[]).unwrap();
        assert_eq!(r.rows_in, 5);
        assert_eq!(r.dropped, 3);
        assert_eq!(r.rows_in - r.dropped, r.data.n_obs());
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        match read("id,x,y\na,1,2\na,abc,3\n", &[]) {
            Err(MkqrError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match read("id,x,y\na,1,2,9\n", &[]) {
            Err(MkqrError::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read("id,q,y\n", &[]), Err(MkqrError::Schema { line: 1, .. })));
        assert!(matches!(read("id,x,y\na,1,2\n", &["w"]), Err(MkqrError::Schema { line: 1, .. })));
    }

    #[test]
    fn config_parsing_and_errors() {
        let c = ExperimentConfig::parse("study = selection\ndgp = DGP1\ncase = CS, AR1\nn = 100\nbeta = -2\nt = 5 # kink\ntau = 0.25,0.5\nreps = 3\n").unwrap();
        assert_eq!(c.cases, vec![ErrorCase::Cs, ErrorCase::Ar1]);
        assert_eq!(c.taus, vec![0.25, 0.5]);
        let e = ExperimentConfig::parse("study = selection\ndgp = DGP1\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let e = ExperimentConfig::parse("study = selection\ndgp = DGP1\ncase = CS\nt = 5\nbeta = -2\n").unwrap_err();
        assert!(e.to_string().contains("'n'"));
        let e = ExperimentConfig::parse("study = selection\ndgp = DGP1\ncase = CS\nn = x\nt = 5\nbeta = -2\n").unwrap_err();
        assert!(e.to_string().contains("'n'"));
    }

    #[test]
    fn bundled_configs_parse() {
        for name in BUNDLED_CONFIGS {
            ExperimentConfig::parse(bundled_config(name).unwrap()).unwrap();
        }
    }
}
