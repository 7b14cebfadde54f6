//! CSV ingestion, estimate orchestration and serializable reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandwidths::{mse_pilot, select, Method, RhoMode, SelectorOptions};
use crate::error::{RdError, Result};
use crate::inference::{infer, ConfidenceInterval};
use crate::kernels::{optimal_rho, Kernel};
use crate::lpfit::{FitConfig, Sample};
use crate::simulate::TableRow;
use crate::variance::VceSpec;

/// Parsed data plus the number of rows dropped for missing or non-finite values.
#[derive(Debug, Clone)]
pub struct ParsedData {
    pub sample: Sample,
    pub dropped: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field, "" | "." | "NA" | "na" | "N/A" | "NaN" | "nan" | "NULL" | "null")
}

fn parse_cell(field: &str, column: &str, line: u64) -> Result<Option<f64>> {
    let t = field.trim();
    if is_missing(t) {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Ok(None),
        Err(_) => Err(RdError::invalid(format!("line {line}: column '{column}' has non-numeric value '{t}'"))),
    }
}

pub fn parse_csv_reader<R: std::io::Read>(
    reader: R,
    score_col: &str,
    outcome_col: &str,
    cutoff: f64,
) -> Result<ParsedData> {
    if !cutoff.is_finite() {
        return Err(RdError::invalid("cutoff must be finite"));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::Headers).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| RdError::invalid(format!("column '{name}' not found; available: {}", headers.iter().collect::<Vec<_>>().join(", "))))
    };
    let xi = find(score_col)?;
    let yi = find(outcome_col)?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut dropped = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let xv = parse_cell(rec.get(xi).unwrap_or(""), score_col, line)?;
        let yv = parse_cell(rec.get(yi).unwrap_or(""), outcome_col, line)?;
        match (xv, yv) {
            (Some(a), Some(b)) => {
                x.push(a);
                y.push(b);
            }
            _ => dropped += 1,
        }
    }
    if x.is_empty() {
        return Err(RdError::invalid("no valid rows"));
    }
    let right = x.iter().filter(|&&v| v >= cutoff).count();
    let left = x.len() - right;
    if left < 2 || right < 2 {
        return Err(RdError::invalid(format!(
            "need at least 2 valid rows per side of the cutoff, found {left} left and {right} right"
        )));
    }
    Ok(ParsedData { sample: Sample::new(x, y, cutoff)?, dropped })
}

pub fn parse_csv(path: &Path, score_col: &str, outcome_col: &str, cutoff: f64) -> Result<ParsedData> {
    let file = std::fs::File::open(path)
        .map_err(|e| RdError::invalid(format!("cannot open {}: {e}", path.display())))?;
    parse_csv_reader(std::io::BufReader::new(file), score_col, outcome_col, cutoff)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthChoice {
    Method(Method),
    Fixed { h: f64, b: Option<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRequest {
    pub input: PathBuf,
    pub score_col: String,
    pub outcome_col: String,
    pub cutoff: f64,
    pub nu: usize,
    pub p: usize,
    pub kernel: Kernel,
    pub bandwidth: BandwidthChoice,
    pub rho_mode: RhoMode,
    pub vce: VceSpec,
    pub alpha: f64,
    pub format: OutputFormat,
}

impl EstimateRequest {
    /// Request with the default local-linear, triangular, HC3, 95%, MSE-optimal setup.
    pub fn new(input: impl Into<PathBuf>, score_col: &str, outcome_col: &str, cutoff: f64) -> Self {
        EstimateRequest {
            input: input.into(),
            score_col: score_col.to_string(),
            outcome_col: outcome_col.to_string(),
            cutoff,
            nu: 0,
            p: 1,
            kernel: Kernel::Triangular,
            bandwidth: BandwidthChoice::Method(Method::MseRd),
            rho_mode: RhoMode::One,
            vce: VceSpec::default(),
            alpha: 0.05,
            format: OutputFormat::Json,
        }
    }

    pub fn selector_options(&self) -> SelectorOptions {
        let mut opts = SelectorOptions::new(self.nu, self.p, self.kernel);
        opts.vce = self.vce;
        opts.alpha = self.alpha;
        opts.rho_mode = self.rho_mode;
        opts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    pub h: f64,
    pub b: f64,
    pub rho: f64,
    pub method: String,
    pub rho_mode: RhoMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub tau_us: f64,
    pub tau_rbc: f64,
    pub se_us: f64,
    pub se_rbc: f64,
    pub t_us: f64,
    pub t_rbc: f64,
    pub ci_us: ConfidenceInterval,
    pub ci_rbc: ConfidenceInterval,
    pub bandwidth: BandwidthReport,
    pub n_total: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub dropped_rows: usize,
    pub settings: BTreeMap<String, String>,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| RdError::numerical(format!("serializing report: {e}")))
    }

    /// One header line and one data line.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "tau_us", "tau_rbc", "se_us", "se_rbc", "t_us", "t_rbc", "ci_us_lower", "ci_us_upper", "ci_rbc_lower",
            "ci_rbc_upper", "h", "b", "rho", "method", "n_left", "n_right",
        ])?;
        let c = |v: f64| v.to_string();
        w.write_record([
            c(self.tau_us),
            c(self.tau_rbc),
            c(self.se_us),
            c(self.se_rbc),
            c(self.t_us),
            c(self.t_rbc),
            c(self.ci_us.lower),
            c(self.ci_us.upper),
            c(self.ci_rbc.lower),
            c(self.ci_rbc.upper),
            c(self.bandwidth.h),
            c(self.bandwidth.b),
            c(self.bandwidth.rho),
            self.bandwidth.method.clone(),
            self.n_left.to_string(),
            self.n_right.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| RdError::invalid(format!("writing csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn finite_only(map: BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    map.into_iter().filter(|(_, v)| v.is_finite()).collect()
}

/// Estimate on an in-memory sample; `dropped` is carried into the report.
pub fn estimate_sample(req: &EstimateRequest, sample: &Sample, dropped: usize) -> Result<EstimateReport> {
    let mut warnings = Vec::new();
    if dropped > 0 {
        warnings.push(format!("cli_io: dropped {dropped} row(s) with missing or non-finite values"));
    }
    let opts = req.selector_options();
    let (h, b, method, diagnostics) = match req.bandwidth {
        BandwidthChoice::Method(m) => {
            let sel = select(sample, m, &opts)?;
            warnings.extend(sel.warnings.iter().cloned());
            (sel.h, sel.b, m.to_string(), finite_only(sel.diagnostics))
        }
        BandwidthChoice::Fixed { h, b } => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(RdError::invalid(format!("fixed bandwidth h must be positive, got {h}")));
            }
            let mut diag = BTreeMap::new();
            let b = match (b, req.rho_mode) {
                (Some(b), _) => b,
                (None, RhoMode::One) => h,
                (None, RhoMode::Star) => {
                    if req.nu != 0 {
                        return Err(RdError::invalid("the optimal rho is tabulated for nu = 0 only"));
                    }
                    h / optimal_rho(req.p, req.kernel)?
                }
                (None, RhoMode::Estimated) => {
                    let pilot = mse_pilot(sample, &opts)?;
                    warnings.extend(pilot.warnings.iter().cloned());
                    diag.insert("b_mse".to_string(), pilot.b);
                    pilot.b
                }
            };
            (h, b, "fixed".to_string(), diag)
        }
    };
    let cfg = FitConfig::new(req.nu, req.p, req.kernel, h, b)?;
    let inf = infer(sample, &cfg, &req.vce, req.alpha)?;
    let (t_us, t_rbc) = inf.t_statistics(0.0)?;
    let n_eff = inf.estimate.n_eff();
    let mut settings = BTreeMap::new();
    settings.insert("nu".into(), req.nu.to_string());
    settings.insert("p".into(), req.p.to_string());
    settings.insert("kernel".into(), req.kernel.to_string());
    settings.insert("vce".into(), req.vce.flavor.to_string());
    if req.vce.flavor == crate::variance::VceFlavor::Nn {
        settings.insert("nn_neighbors".into(), req.vce.nn_neighbors.to_string());
    }
    settings.insert("alpha".into(), req.alpha.to_string());
    settings.insert("rho_mode".into(), req.rho_mode.to_string());
    settings.insert("cutoff".into(), sample.c().to_string());
    settings.insert("bandwidth".into(), method.clone());
    Ok(EstimateReport {
        tau_us: inf.estimate.tau_us,
        tau_rbc: inf.estimate.tau_rbc,
        se_us: inf.variance.se_us,
        se_rbc: inf.variance.se_rbc,
        t_us,
        t_rbc,
        ci_us: inf.us,
        ci_rbc: inf.rbc,
        bandwidth: BandwidthReport { h, b, rho: h / b, method, rho_mode: req.rho_mode },
        n_total: sample.n(),
        n_left: n_eff[0],
        n_right: n_eff[1],
        dropped_rows: dropped,
        settings,
        diagnostics,
        warnings,
    })
}

pub fn run_estimate(req: &EstimateRequest) -> Result<EstimateReport> {
    let data = parse_csv(&req.input, &req.score_col, &req.outcome_col, req.cutoff)?;
    estimate_sample(req, &data.sample, data.dropped)
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
