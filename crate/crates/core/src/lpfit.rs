//! One-sided local polynomial fits and the RD point estimators.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::kernels::Kernel;
use crate::numeric::{factorial, powers_into};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn sign(self) -> f64 {
        match self {
            Side::Left => -1.0,
            Side::Right => 1.0,
        }
    }

    /// Observations at the cutoff belong to the right (treated) side.
    #[inline]
    pub fn contains(self, x: f64, c: f64) -> bool {
        match self {
            Side::Left => x < c,
            Side::Right => x >= c,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    x: Vec<f64>,
    y: Vec<f64>,
    c: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>, c: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(RdError::invalid(format!(
                "score and outcome lengths differ ({} vs {})",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(RdError::invalid("need at least two observations"));
        }
        if !c.is_finite() {
            return Err(RdError::invalid("cutoff must be finite"));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(RdError::invalid("scores and outcomes must be finite"));
        }
        let s = Sample { x, y, c };
        for side in Side::BOTH {
            if s.count(side) == 0 {
                return Err(RdError::invalid(format!("no observations on the {side} side of the cutoff")));
            }
        }
        Ok(s)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn side_of(&self, i: usize) -> Side {
        if self.x[i] >= self.c {
            Side::Right
        } else {
            Side::Left
        }
    }

    pub fn count(&self, side: Side) -> usize {
        self.x.iter().filter(|&&x| side.contains(x, self.c)).count()
    }

    /// Largest distance from the cutoff among observations on `side`.
    pub fn reach(&self, side: Side) -> f64 {
        self.x
            .iter()
            .filter(|&&x| side.contains(x, self.c))
            .map(|x| (x - self.c).abs())
            .fold(0.0, f64::max)
    }

    pub fn range(&self) -> f64 {
        let lo = self.x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Sample> {
        Sample::new(self.x.clone(), y, self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub nu: usize,
    pub p: usize,
    pub kernel: Kernel,
    pub h: f64,
    pub b: f64,
}

impl FitConfig {
    pub fn new(nu: usize, p: usize, kernel: Kernel, h: f64, b: f64) -> Result<Self> {
        if p < nu.max(1) {
            return Err(RdError::invalid(format!("polynomial order p = {p} must be at least max(1, nu = {nu})")));
        }
        Self::unchecked(nu, p, kernel, h, b)
    }

    /// Skips the p ≥ max(1, ν) rule, for pilot fits.
    pub fn unchecked(nu: usize, p: usize, kernel: Kernel, h: f64, b: f64) -> Result<Self> {
        if p < nu {
            return Err(RdError::invalid(format!("p = {p} is below nu = {nu}")));
        }
        for (name, v) in [("h", h), ("b", b)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RdError::invalid(format!("bandwidth {name} must be positive and finite, got {v}")));
            }
        }
        Ok(FitConfig { nu, p, kernel, h, b })
    }

    pub fn q(&self) -> usize {
        self.p + 1
    }

    pub fn rho(&self) -> f64 {
        self.h / self.b
    }
}

/// Weighted least-squares fit of order `order` on one side of the cutoff.
///
/// Matrices are in scaled form: regressors are powers of (X - c)/bw and the
/// Gram matrix carries the 1/(n·bw) factor with n the full sample size.
#[derive(Debug, Clone)]
pub struct SideFit {
    pub side: Side,
    pub order: usize,
    pub bw: f64,
    pub kernel: Kernel,
    /// Coefficients in score units: beta[j] multiplies (x - c)^j.
    pub beta: Vec<f64>,
    pub gram: DMatrix<f64>,
    pub lambda1: DVector<f64>,
    pub lambda2: DVector<f64>,
    pub n_eff: usize,
    pub(crate) gram_inv: DMatrix<f64>,
    /// R⁻¹ for the QR factor of the weighted design, Γ = R'R.
    pub(crate) r_inv: DMatrix<f64>,
    /// Thin Q of the weighted design, one row per support point.
    pub(crate) qmat: DMatrix<f64>,
    pub(crate) lev: Vec<f64>,
    pub(crate) g_lambda1: DVector<f64>,
    pub(crate) g_lambda2: DVector<f64>,
    pub(crate) n_total: usize,
    /// Indexes (into the sample) of observations with positive weight.
    pub(crate) idx: Vec<usize>,
    pub(crate) w: Vec<f64>,
}

impl SideFit {
    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    /// R⁻¹ with Γ = R'R (upper triangular), so Γ⁻¹ = R⁻¹R⁻ᵀ.
    pub fn gram_root_inverse(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// Γ⁻¹Λ₁, solved as a least-squares problem.
    pub fn gamma_lambda(&self) -> &DVector<f64> {
        &self.g_lambda1
    }

    /// Γ⁻¹Λ₂.
    pub fn gamma_lambda2(&self) -> &DVector<f64> {
        &self.g_lambda2
    }

    /// Indexes of observations receiving positive kernel weight.
    pub fn support(&self) -> &[usize] {
        &self.idx
    }

    /// Fitted polynomial at score x.
    pub fn predict(&self, x: f64, c: f64) -> f64 {
        let d = x - c;
        self.beta.iter().rev().fold(0.0, |acc, b| acc * d + b)
    }

    /// k-th derivative of the fitted polynomial at the cutoff.
    pub fn derivative(&self, k: usize) -> f64 {
        if k >= self.beta.len() {
            0.0
        } else {
            factorial(k) * self.beta[k]
        }
    }

    fn dim(&self) -> usize {
        self.order + 1
    }

    /// Per-support-point weights ω_k with e_j'γ̂ = Σ ω_k y_k, γ̂ the scaled coefficients.
    pub(crate) fn coef_weights(&self, j: usize) -> Vec<f64> {
        let scale = 1.0 / (self.n_total as f64 * self.bw);
        (0..self.idx.len())
            .map(|k| {
                let t: f64 = (j..self.dim()).map(|l| self.r_inv[(j, l)] * self.qmat[(k, l)]).sum();
                (scale * self.w[k]).sqrt() * t
            })
            .collect()
    }

    /// Leverages ℓ_kk of the kernel-weighted regression, aligned with `support()`.
    pub fn leverages(&self) -> Vec<f64> {
        self.lev.clone()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn quad_form(m: &DMatrix<f64>, r: &[f64]) -> f64 {
    let d = r.len();
    let mut s = 0.0;
    for a in 0..d {
        let mut t = 0.0;
        for b in 0..d {
            t += m[(a, b)] * r[b];
        }
        s += r[a] * t;
    }
    s
}

pub fn fit_side(sample: &Sample, order: usize, kernel: Kernel, bw: f64, side: Side) -> Result<SideFit> {
    if !(bw > 0.0 && bw.is_finite()) {
        return Err(RdError::invalid(format!("bandwidth must be positive and finite, got {bw}")));
    }
    let dim = order + 1;
    let c = sample.c();
    let n = sample.n();
    let mut idx = Vec::new();
    let mut us = Vec::new();
    let mut ws = Vec::new();
    for (i, &x) in sample.x().iter().enumerate() {
        if !side.contains(x, c) {
            continue;
        }
        let u = (x - c) / bw;
        let w = kernel.eval(u);
        if w > 0.0 {
            idx.push(i);
            us.push(u);
            ws.push(w);
        }
    }
    let n_eff = idx.len();
    if n_eff < order + 2 {
        return Err(RdError::insufficient(
            side,
            format!("{n_eff} observations with positive weight at bandwidth {bw:.6}; order {order} needs at least {}", order + 2),
        ));
    }
    let mut distinct = us.clone();
    distinct.sort_by(|a, b| a.total_cmp(b));
    distinct.dedup();
    if distinct.len() < dim {
        return Err(RdError::insufficient(
            side,
            format!("{} distinct score values in the window; order {order} needs {dim}", distinct.len()),
        ));
    }

    let scale = 1.0 / (n as f64 * bw);
    let m = idx.len();
    let mut design = DMatrix::<f64>::zeros(m, dim);
    let mut ys = DVector::<f64>::zeros(m);
    let mut t1 = DVector::<f64>::zeros(m);
    let mut t2 = DVector::<f64>::zeros(m);
    let mut r = vec![0.0; dim];
    for (k, &i) in idx.iter().enumerate() {
        let (u, sw) = (us[k], (scale * ws[k]).sqrt());
        powers_into(u, &mut r);
        for a in 0..dim {
            design[(k, a)] = sw * r[a];
        }
        let up1 = r[order] * u;
        ys[k] = sw * sample.y()[i];
        t1[k] = sw * up1;
        t2[k] = sw * up1 * u;
    }
    let gram = design.transpose() * &design;
    let qr = design.qr();
    let rmat = qr.r();
    let qmat = qr.q();
    let diag: Vec<f64> = (0..dim).map(|a| rmat[(a, a)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(dmax > 0.0) || dmin <= 1e-8 * dmax {
        return Err(RdError::insufficient(side, format!("numerically singular Gram matrix at bandwidth {bw:.6}, order {order}")));
    }
    let r_inv = rmat
        .solve_upper_triangular(&DMatrix::identity(dim, dim))
        .ok_or_else(|| RdError::insufficient(side, format!("numerically singular Gram matrix at bandwidth {bw:.6}, order {order}")))?;
    let gram_inv = &r_inv * r_inv.transpose();
    let qt = qmat.transpose();
    let gamma = &r_inv * (&qt * &ys);
    let lambda1 = rmat.transpose() * (&qt * &t1);
    let lambda2 = rmat.transpose() * (&qt * &t2);
    let g_lambda1 = &r_inv * (&qt * &t1);
    let g_lambda2 = &r_inv * (&qt * &t2);
    let lev = (0..m).map(|k| qmat.row(k).norm_squared()).collect();
    let beta: Vec<f64> = (0..dim).map(|j| gamma[j] / bw.powi(j as i32)).collect();
    Ok(SideFit {
        side,
        order,
        bw,
        kernel,
        beta,
        gram,
        lambda1,
        lambda2,
        n_eff,
        gram_inv,
        r_inv,
        qmat,
        lev,
        g_lambda1,
        g_lambda2,
        n_total: n,
        idx,
        w: ws,
    })
}

/// Least-squares polynomial over every observation on `side` (uniform weights).
pub fn global_fit(sample: &Sample, order: usize, side: Side) -> Result<SideFit> {
    let reach = sample.reach(side);
    let bw = if reach > 0.0 { reach * (1.0 + 1e-9) } else { 1.0 };
    fit_side(sample, order, Kernel::Uniform, bw, side)
}

#[derive(Debug, Clone)]
pub struct RdEstimate {
    pub tau_us: f64,
    pub tau_rbc: f64,
    pub bias_hat: f64,
    /// Order-p fits at h, indexed by `Side::index()`.
    pub fits_p: [SideFit; 2],
    /// Order-(p+1) fits at b.
    pub fits_q: [SideFit; 2],
    /// μ̂^{(p+1)} on each side from the order-(p+1) fits.
    pub mu_hat: [f64; 2],
    pub config: FitConfig,
}

pub fn point_estimate(sample: &Sample, config: &FitConfig) -> Result<RdEstimate> {
    let (nu, p, q) = (config.nu, config.p, config.q());
    let fl = fit_side(sample, p, config.kernel, config.h, Side::Left)?;
    let fr = fit_side(sample, p, config.kernel, config.h, Side::Right)?;
    let ql = fit_side(sample, q, config.kernel, config.b, Side::Left)?;
    let qr = fit_side(sample, q, config.kernel, config.b, Side::Right)?;
    let nu_fact = factorial(nu);
    let tau_us = nu_fact * (fr.beta[nu] - fl.beta[nu]);
    let mu_hat = [ql.derivative(p + 1), qr.derivative(p + 1)];
    let mut bias_hat = 0.0;
    for (fit, mu) in [(&fl, mu_hat[0]), (&fr, mu_hat[1])] {
        let g_lambda = &fit.g_lambda1;
        bias_hat += fit.side.sign() * nu_fact / factorial(p + 1) * g_lambda[nu] * mu;
    }
    let tau_rbc = tau_us - config.h.powi((p + 1 - nu) as i32) * bias_hat;
    Ok(RdEstimate {
        tau_us,
        tau_rbc,
        bias_hat,
        fits_p: [fl, fr],
        fits_q: [ql, qr],
        mu_hat,
        config: *config,
    })
}

impl RdEstimate {
    /// Weights w with τ̂_ν = Σ w_i Y_i (length n, zero outside the h-window).
    pub fn weights_us(&self) -> Vec<f64> {
        let nu = self.config.nu;
        let h = self.config.h;
        let n = self.fits_p[0].n_total;
        let mut w = vec![0.0; n];
        for fit in &self.fits_p {
            // coef_weights(nu) gives e_ν'γ̂ with β_ν = γ_ν / h^ν
            let om = fit.coef_weights(nu);
            let scale = fit.side.sign() * factorial(nu) / h.powi(nu as i32);
            for (k, &i) in fit.idx.iter().enumerate() {
                w[i] += scale * om[k];
            }
        }
        w
    }

    /// Weights w_BC with τ̂_BC = Σ w_BC,i Y_i.
    pub fn weights_rbc(&self) -> Vec<f64> {
        let (nu, p) = (self.config.nu, self.config.p);
        let h = self.config.h;
        let b = self.config.b;
        let mut w = self.weights_us();
        for s in 0..2 {
            let fp = &self.fits_p[s];
            let fq = &self.fits_q[s];
            let g_lambda = &fp.g_lambda1;
            // h^{p+1-ν} ν!/(p+1)! (Γ⁻¹Λ)_ν (p+1)! γ_q[p+1] / b^{p+1}
            let scale = fp.side.sign() * factorial(nu) * g_lambda[nu] * h.powi((p + 1 - nu) as i32)
                / b.powi(p as i32 + 1);
            let om = fq.coef_weights(p + 1);
            for (k, &i) in fq.idx.iter().enumerate() {
                w[i] -= scale * om[k];
            }
        }
        w
    }

    pub fn rho(&self) -> f64 {
        self.config.rho()
    }

    pub fn n_eff(&self) -> [usize; 2] {
        [self.fits_p[0].n_eff, self.fits_p[1].n_eff]
    }
}

/// Rescale an MSE-type bandwidth to the coverage-error-optimal rate:
/// count^{-p/((2p+3)(p+3))} · h_base.
pub fn rot_rescale(h_base: f64, count: usize, p: usize) -> f64 {
    let p = p as f64;
    let exponent = -p / ((2.0 * p + 3.0) * (p + 3.0));
    (count as f64).powf(exponent) * h_base
}
