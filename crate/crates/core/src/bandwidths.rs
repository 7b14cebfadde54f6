//! Bandwidth selectors: MSE plug-in, coverage-error DPI, rule-of-thumb rescaling,
//! undersmoothing CE-optimal, and the coverage/length trade-off.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cecoef::{estimate_ce_constants, CeConstants, Flavor};
use crate::error::{RdError, Result};
use crate::inference::z_critical;
use crate::kernels::{optimal_rho, Kernel};
use crate::lpfit::{fit_side, point_estimate, rot_rescale, FitConfig, Sample, Side};
use crate::numeric::{golden_section, quantile, std_dev};
use crate::variance::{fit_residuals, sandwich, variance_rbc, VceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    MseRd,
    CeDpi,
    CeRot,
    TradeOff,
    UsCe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MseRd => "mserd",
            Method::CeDpi => "cerdpi",
            Method::CeRot => "cerot",
            Method::TradeOff => "tradeoff",
            Method::UsCe => "usce",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mserd" | "mse" => Ok(Method::MseRd),
            "cerdpi" | "dpi" => Ok(Method::CeDpi),
            "cerot" | "rot" => Ok(Method::CeRot),
            "tradeoff" | "tr" => Ok(Method::TradeOff),
            "usce" => Ok(Method::UsCe),
            other => Err(RdError::invalid(format!("unknown bandwidth method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoMode {
    One,
    Star,
    Estimated,
}

impl fmt::Display for RhoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RhoMode::One => "one",
            RhoMode::Star => "star",
            RhoMode::Estimated => "estimated",
        })
    }
}

impl FromStr for RhoMode {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one" | "1" => Ok(RhoMode::One),
            "star" => Ok(RhoMode::Star),
            "estimated" | "hat" => Ok(RhoMode::Estimated),
            other => Err(RdError::invalid(format!("unknown rho mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectorOptions {
    pub nu: usize,
    pub p: usize,
    pub kernel: Kernel,
    pub vce: VceSpec,
    pub alpha: f64,
    pub rho_mode: RhoMode,
    /// Scale of the bias-variance regularization in the MSE pilot chain (0 disables it).
    pub regularization: f64,
    /// Residuals for the coverage-error constants; `None` means raw residuals.
    pub ce_residuals: Option<VceSpec>,
    pub tradeoff_weight: f64,
    pub gamma_tr: Option<f64>,
}

impl SelectorOptions {
    pub fn new(nu: usize, p: usize, kernel: Kernel) -> Self {
        SelectorOptions {
            nu,
            p,
            kernel,
            vce: VceSpec::default(),
            alpha: 0.05,
            rho_mode: RhoMode::One,
            regularization: 1.0,
            ce_residuals: None,
            tradeoff_weight: 0.5,
            gamma_tr: None,
        }
    }

    fn ce_vce(&self) -> VceSpec {
        self.ce_residuals.unwrap_or_else(VceSpec::hc0)
    }
}

impl Default for SelectorOptions {
    fn default() -> Self {
        SelectorOptions::new(0, 1, Kernel::Triangular)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSelection {
    pub h: f64,
    pub b: f64,
    pub rho_mode: RhoMode,
    pub method: Method,
    pub objective_value: f64,
    pub constants: Option<CeConstants>,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl BandwidthSelection {
    pub fn rho(&self) -> f64 {
        self.h / self.b
    }

    pub fn config(&self, nu: usize, p: usize, kernel: Kernel) -> Result<FitConfig> {
        FitConfig::new(nu, p, kernel, self.h, self.b)
    }

    pub fn diagnostic(&self, key: &str) -> Option<f64> {
        self.diagnostics.get(key).copied()
    }
}

/// Variance, bias and regularization pieces of one plug-in stage.
#[derive(Debug, Clone, Copy)]
struct StageParts {
    v: f64,
    b: f64,
    r: f64,
}

/// One MSE plug-in stage: variance of the ν-th coefficient from an order-`o`
/// fit at `h_v`; its bias from the (o+1)-th coefficient of an order-`o_b` fit at `h_b`.
#[allow(clippy::too_many_arguments)]
fn mse_stage(
    sample: &Sample,
    kernel: Kernel,
    vce: &VceSpec,
    o: usize,
    nu: usize,
    h_v: f64,
    h_b: f64,
    o_b: usize,
) -> Result<StageParts> {
    let mut parts = StageParts { v: 0.0, b: 0.0, r: 0.0 };
    for side in Side::BOTH {
        let fit_v = fit_side(sample, o, kernel, h_v, side)?;
        let res_v = fit_residuals(sample, &fit_v, vce)?;
        let om = fit_v.coef_weights(nu);
        let scale = 1.0 / h_v.powi(nu as i32);
        let mut var = 0.0;
        for (k, &i) in fit_v.support().iter().enumerate() {
            var += (scale * om[k] * res_v[i]).powi(2);
        }
        let bconst = (fit_v.gram_inverse() * &fit_v.lambda1)[nu];

        let fit_b = fit_side(sample, o_b, kernel, h_b, side)?;
        let coef = fit_b.beta[o + 1];
        let res_b = fit_residuals(sample, &fit_b, vce)?;
        let om_b = fit_b.coef_weights(o + 1);
        let scale_b = 1.0 / h_b.powi(o as i32 + 1);
        let w_b: Vec<f64> = om_b.iter().map(|w| w * scale_b).collect();
        let r_b: Vec<f64> = fit_b.support().iter().map(|&i| res_b[i]).collect();
        let var_b = sandwich(&w_b, &r_b);

        parts.v += var;
        parts.b += side.sign() * bconst * coef;
        parts.r += 3.0 * bconst * bconst * var_b;
    }
    Ok(parts)
}

fn stage_bandwidth(parts: StageParts, o: usize, nu: usize, h_v: f64, reg: f64, range: f64, what: &str) -> Result<f64> {
    let num = (2 * nu + 1) as f64 * h_v.powi(2 * nu as i32 + 1) * parts.v;
    let den = 2.0 * (o + 1 - nu) as f64 * (parts.b * parts.b + reg * parts.r);
    let h = (num / den).powf(1.0 / (2 * o + 3) as f64);
    if !(h.is_finite() && h > 0.0) || h > 1e8 * range {
        return Err(RdError::numerical(format!(
            "MSE objective degenerate for {what} (estimated bias {:.3e}); the bias constant must be nonzero",
            parts.b
        )));
    }
    Ok(h)
}

fn pilot_variance_bandwidth(sample: &Sample, kernel: Kernel) -> f64 {
    let x = sample.x();
    let sd = std_dev(x);
    let iqr = quantile(x, 0.75) - quantile(x, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.349) } else { sd };
    let c_bw = kernel.pilot_constant() * spread * (sample.n() as f64).powf(-0.2);
    c_bw.min(sample.reach(Side::Left).max(sample.reach(Side::Right)))
}

/// Estimated MSE-optimal bandwidths (ĥ, b̂) with diagnostics.
#[derive(Debug, Clone)]
pub struct MsePilot {
    pub h: f64,
    pub b: f64,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

pub fn mse_pilot(sample: &Sample, opts: &SelectorOptions) -> Result<MsePilot> {
    let (nu, p, kernel) = (opts.nu, opts.p, opts.kernel);
    if p < nu {
        return Err(RdError::invalid(format!("p = {p} is below nu = {nu}")));
    }
    let q = p + 1;
    let range = sample.range();
    let reg = opts.regularization;
    let mut warnings = Vec::new();
    let c_bw = pilot_variance_bandwidth(sample, kernel);
    let global = range * (1.0 + 1e-8);

    let d_parts = mse_stage(sample, kernel, &opts.vce, q + 1, q + 1, c_bw, global, q + 2)?;
    let mut d_bw = stage_bandwidth(d_parts, q + 1, q + 1, c_bw, reg, range, "the derivative pilot")?;
    if d_bw > range {
        d_bw = range;
    }
    let b_parts = mse_stage(sample, kernel, &opts.vce, q, p + 1, c_bw, d_bw, q + 1)?;
    let mut b_bw = stage_bandwidth(b_parts, q, p + 1, c_bw, reg, range, "the bias bandwidth")?;
    if b_bw > range {
        warnings.push(format!("bandwidths: b_mse {b_bw:.4} clipped to the score range {range:.4}"));
        b_bw = range;
    }
    let h_parts = mse_stage(sample, kernel, &opts.vce, p, nu, c_bw, b_bw, q)?;
    let mut h_bw = stage_bandwidth(h_parts, p, nu, c_bw, reg, range, "the main bandwidth")?;
    if h_bw > range {
        warnings.push(format!("bandwidths: h_mse {h_bw:.4} clipped to the score range {range:.4}"));
        h_bw = range;
    }
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("pilot_variance_bw".into(), c_bw);
    diagnostics.insert("pilot_derivative_bw".into(), d_bw);
    diagnostics.insert("b_mse".into(), b_bw);
    diagnostics.insert("h_mse".into(), h_bw);
    diagnostics.insert("v_hat".into(), h_parts.v);
    diagnostics.insert("b_hat_sq".into(), h_parts.b * h_parts.b);
    diagnostics.insert("r_hat".into(), h_parts.r);
    Ok(MsePilot { h: h_bw, b: b_bw, diagnostics, warnings })
}

fn rho_star_for(nu: usize, p: usize, kernel: Kernel) -> Result<f64> {
    if nu != 0 {
        return Err(RdError::invalid("the optimal rho is tabulated for nu = 0 only"));
    }
    optimal_rho(p, kernel)
}

/// Bias bandwidth for a main bandwidth h under the requested ρ rule, clipped to the score range.
fn bias_bandwidth(
    h: f64,
    mode: RhoMode,
    b_mse: f64,
    opts: &SelectorOptions,
    range: f64,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    let b = match mode {
        RhoMode::One => h,
        RhoMode::Star => h / rho_star_for(opts.nu, opts.p, opts.kernel)?,
        RhoMode::Estimated => b_mse,
    };
    if b > range {
        warnings.push(format!("bandwidths: b {b:.4} clipped to the score range {range:.4}"));
        return Ok(range);
    }
    Ok(b)
}

pub fn h_mse_plugin(sample: &Sample, opts: &SelectorOptions) -> Result<BandwidthSelection> {
    let mut pilot = mse_pilot(sample, opts)?;
    let b = bias_bandwidth(pilot.h, opts.rho_mode, pilot.b, opts, sample.range(), &mut pilot.warnings)?;
    let mut diagnostics = pilot.diagnostics;
    diagnostics.insert("rho".into(), pilot.h / b);
    Ok(BandwidthSelection {
        h: pilot.h,
        b,
        rho_mode: opts.rho_mode,
        method: Method::MseRd,
        objective_value: f64::NAN,
        constants: None,
        diagnostics,
        warnings: pilot.warnings,
    })
}

pub fn h_ce_rot(sample: &Sample, opts: &SelectorOptions) -> Result<BandwidthSelection> {
    let mut pilot = mse_pilot(sample, opts)?;
    let h = rot_rescale(pilot.h, sample.n(), opts.p);
    let b = bias_bandwidth(h, opts.rho_mode, pilot.b, opts, sample.range(), &mut pilot.warnings)?;
    let mut diagnostics = pilot.diagnostics;
    diagnostics.insert("rot_factor".into(), h / pilot.h);
    diagnostics.insert("rho".into(), h / b);
    Ok(BandwidthSelection {
        h,
        b,
        rho_mode: opts.rho_mode,
        method: Method::CeRot,
        objective_value: f64::NAN,
        constants: None,
        diagnostics,
        warnings: pilot.warnings,
    })
}

/// Result of minimizing |q1/H + H^e2·q2 + H^e3·q3| over a bracket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeMinimum {
    pub h_const: f64,
    pub objective: f64,
    pub at_edge: bool,
}

pub fn ce_objective(h_const: f64, q: (f64, f64, f64), e2: i32, e3: i32) -> f64 {
    (q.0 / h_const + h_const.powi(e2) * q.1 + h_const.powi(e3) * q.2).abs()
}

/// Log-grid search (60 points) over [lo, hi] followed by golden-section refinement.
pub fn minimize_ce_objective(q: (f64, f64, f64), e2: i32, e3: i32, lo: f64, hi: f64) -> Result<CeMinimum> {
    let mag = q.0.abs().max(q.1.abs()).max(q.2.abs());
    if !(mag > 1e-300) || !mag.is_finite() {
        return Err(RdError::numerical("coverage-error constants are all zero; the objective is flat"));
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(RdError::invalid(format!("invalid search bracket [{lo}, {hi}]")));
    }
    const GRID: usize = 60;
    let step = (hi / lo).ln() / (GRID - 1) as f64;
    let grid: Vec<f64> = (0..GRID).map(|k| lo * (step * k as f64).exp()).collect();
    let f = |h: f64| ce_objective(h, q, e2, e3);
    let mut best = 0;
    for k in 1..GRID {
        if f(grid[k]) < f(grid[best]) {
            best = k;
        }
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(GRID - 1)];
    let (h_const, objective) = golden_section(f, a, b, 1e-9);
    let at_edge = best == 0 || best == GRID - 1;
    let (h_const, objective) = if f(grid[best]) < objective { (grid[best], f(grid[best])) } else { (h_const, objective) };
    Ok(CeMinimum { h_const, objective, at_edge })
}

/// Rate, exponents of the 𝒬2 and 𝒬3 terms for a coverage-error objective.
fn ce_shape(flavor: Flavor, p: usize) -> (f64, i32, i32) {
    let p = p as i32;
    match flavor {
        Flavor::Rbc => (1.0 / (3 + p) as f64, 5 + 2 * p, 2 + p),
        Flavor::Us => (1.0 / (2 + p) as f64, 3 + 2 * p, 1 + p),
    }
}

/// Minimize the coverage-error objective for given constants and return
/// (h, minimum). The search bracket is [0.05, 20]·`spread` on the H scale.
pub fn ce_bandwidth_from_constants(
    q: (f64, f64, f64),
    flavor: Flavor,
    p: usize,
    n: usize,
    spread: f64,
) -> Result<(f64, CeMinimum)> {
    let (rate, e2, e3) = ce_shape(flavor, p);
    let scale = (n as f64).powf(rate);
    let min = minimize_ce_objective(q, e2, e3, 0.05 * spread, 20.0 * spread)?;
    Ok((min.h_const / scale, min))
}

fn dpi_like(sample: &Sample, opts: &SelectorOptions, flavor: Flavor) -> Result<BandwidthSelection> {
    let (nu, p) = (opts.nu, opts.p);
    let pilot = mse_pilot(sample, opts)?;
    let pilot_rho = match opts.rho_mode {
        RhoMode::One => 1.0,
        RhoMode::Star => rho_star_for(nu, p, opts.kernel)?,
        RhoMode::Estimated => pilot.h / pilot.b,
    };
    let pilot_cfg = FitConfig::new(nu, p, opts.kernel, pilot.h, pilot.h / pilot_rho)?;
    let constants = estimate_ce_constants(sample, &pilot_cfg, flavor, &opts.ce_vce(), opts.alpha)?;
    let method = match flavor {
        Flavor::Rbc => Method::CeDpi,
        Flavor::Us => Method::UsCe,
    };
    let (mut h, min) = ce_bandwidth_from_constants(
        (constants.q1, constants.q2, constants.q3),
        flavor,
        p,
        sample.n(),
        std_dev(sample.x()),
    )?;
    let mut warnings = pilot.warnings.clone();
    if min.at_edge {
        warnings.push(format!(
            "bandwidths: coverage-error minimizer at the search bracket edge (H = {:.4})",
            min.h_const
        ));
    }
    let range = sample.range();
    if h > range {
        warnings.push(format!("bandwidths: h {h:.4} clipped to the score range {range:.4}"));
        h = range;
    }
    let b = bias_bandwidth(h, opts.rho_mode, pilot.b, opts, range, &mut warnings)?;
    let mut diagnostics = pilot.diagnostics;
    diagnostics.insert("H".into(), min.h_const);
    diagnostics.insert("pilot_rho".into(), pilot_rho);
    diagnostics.insert("rho".into(), h / b);
    diagnostics.insert("q1".into(), constants.q1);
    diagnostics.insert("q2".into(), constants.q2);
    diagnostics.insert("q3".into(), constants.q3);
    diagnostics.insert("bracket_edge".into(), if min.at_edge { 1.0 } else { 0.0 });
    Ok(BandwidthSelection {
        h,
        b,
        rho_mode: opts.rho_mode,
        method,
        objective_value: min.objective,
        constants: Some(constants),
        diagnostics,
        warnings,
    })
}

pub fn h_ce_dpi(sample: &Sample, opts: &SelectorOptions) -> Result<BandwidthSelection> {
    dpi_like(sample, opts, Flavor::Rbc)
}

pub fn h_us_ce(sample: &Sample, opts: &SelectorOptions) -> Result<BandwidthSelection> {
    dpi_like(sample, opts, Flavor::Us)
}

/// Midpoint of the admissible trade-off exponents (1/(5+2p), 1/(3+p)].
pub fn default_gamma_tr(p: usize) -> f64 {
    let p = p as f64;
    0.5 * (1.0 / (5.0 + 2.0 * p) + 1.0 / (3.0 + p))
}

/// Closed-form trade-off constant H_TR.
pub fn tradeoff_constant(v_bc_hat: f64, q2_hat: f64, nu: usize, p: usize, w: f64, alpha: f64) -> Result<f64> {
    if !(w > 0.0 && w < 1.0) {
        return Err(RdError::invalid(format!("trade-off weight W must lie in (0, 1), got {w}")));
    }
    if q2_hat == 0.0 || !q2_hat.is_finite() {
        return Err(RdError::numerical("trade-off requires a nonzero bias constant Q2"));
    }
    if !(v_bc_hat > 0.0) {
        return Err(RdError::numerical("trade-off requires a positive variance estimate"));
    }
    let z = z_critical(alpha);
    let (nu, p) = (nu as f64, p as f64);
    let inner = (1.0 - w) / w * (1.0 + 2.0 * nu) / (5.0 + 2.0 * p) * 4.0 * z * z * v_bc_hat / q2_hat.abs();
    Ok(inner.powf(1.0 / (6.0 + 2.0 * p + 2.0 * nu)))
}

#[allow(clippy::too_many_arguments)]
pub fn h_tradeoff(
    v_bc_hat: f64,
    q2_hat: f64,
    nu: usize,
    p: usize,
    w: f64,
    gamma_tr: f64,
    n: usize,
    alpha: f64,
) -> Result<BandwidthSelection> {
    let lo = 1.0 / (5 + 2 * p) as f64;
    let hi = 1.0 / (3 + p) as f64;
    if !(gamma_tr > lo && gamma_tr <= hi) {
        return Err(RdError::invalid(format!(
            "gamma_tr = {gamma_tr} outside the admissible range (1/(5+2p), 1/(3+p)] = ({lo:.6}, {hi:.6}]"
        )));
    }
    let h_const = tradeoff_constant(v_bc_hat, q2_hat, nu, p, w, alpha)?;
    let h = h_const * (n as f64).powf(-gamma_tr);
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("H_tr".into(), h_const);
    diagnostics.insert("W".into(), w);
    diagnostics.insert("gamma_tr".into(), gamma_tr);
    diagnostics.insert("q2_sign".into(), q2_hat.signum());
    diagnostics.insert("v_bc_hat".into(), v_bc_hat);
    Ok(BandwidthSelection {
        h,
        b: h,
        rho_mode: RhoMode::One,
        method: Method::TradeOff,
        objective_value: f64::NAN,
        constants: None,
        diagnostics,
        warnings: Vec::new(),
    })
}

/// Data-driven trade-off bandwidth: V̂_BC and 𝒬̂_{RBC,2} estimated at the MSE pilot.
pub fn h_tradeoff_data(sample: &Sample, opts: &SelectorOptions) -> Result<BandwidthSelection> {
    let (nu, p) = (opts.nu, opts.p);
    let pilot = mse_pilot(sample, opts)?;
    let pilot_rho = match opts.rho_mode {
        RhoMode::One => 1.0,
        RhoMode::Star => rho_star_for(nu, p, opts.kernel)?,
        RhoMode::Estimated => pilot.h / pilot.b,
    };
    let cfg = FitConfig::new(nu, p, opts.kernel, pilot.h, pilot.h / pilot_rho)?;
    let constants = estimate_ce_constants(sample, &cfg, Flavor::Rbc, &opts.ce_vce(), opts.alpha)?;
    let est = point_estimate(sample, &cfg)?;
    let v_bc = variance_rbc(sample, &est, &opts.vce)?;
    let gamma = opts.gamma_tr.unwrap_or_else(|| default_gamma_tr(p));
    let mut sel = h_tradeoff(v_bc, constants.q2, nu, p, opts.tradeoff_weight, gamma, sample.n(), opts.alpha)?;
    let range = sample.range();
    sel.warnings = pilot.warnings.clone();
    if sel.h > range {
        sel.warnings.push(format!("bandwidths: h {:.4} clipped to the score range {range:.4}", sel.h));
        sel.h = range;
    }
    sel.b = bias_bandwidth(sel.h, opts.rho_mode, pilot.b, opts, range, &mut sel.warnings)?;
    sel.rho_mode = opts.rho_mode;
    for (k, v) in pilot.diagnostics {
        sel.diagnostics.insert(k, v);
    }
    sel.diagnostics.insert("rho".into(), sel.h / sel.b);
    sel.constants = Some(constants);
    Ok(sel)
}

pub fn select(sample: &Sample, method: Method, opts: &SelectorOptions) -> Result<BandwidthSelection> {
    match method {
        Method::MseRd => h_mse_plugin(sample, opts),
        Method::CeDpi => h_ce_dpi(sample, opts),
        Method::CeRot => h_ce_rot(sample, opts),
        Method::TradeOff => h_tradeoff_data(sample, opts),
        Method::UsCe => h_us_ce(sample, opts),
    }
}
