//! Residual construction (HC0-HC3, nearest neighbor) and fixed-n sandwich variances.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::lpfit::{RdEstimate, Sample, Side, SideFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VceFlavor {
    Hc0,
    Hc1,
    Hc2,
    Hc3,
    Nn,
}

impl fmt::Display for VceFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VceFlavor::Hc0 => "hc0",
            VceFlavor::Hc1 => "hc1",
            VceFlavor::Hc2 => "hc2",
            VceFlavor::Hc3 => "hc3",
            VceFlavor::Nn => "nn",
        })
    }
}

impl FromStr for VceFlavor {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hc0" => Ok(VceFlavor::Hc0),
            "hc1" => Ok(VceFlavor::Hc1),
            "hc2" => Ok(VceFlavor::Hc2),
            "hc3" => Ok(VceFlavor::Hc3),
            "nn" => Ok(VceFlavor::Nn),
            other => Err(RdError::invalid(format!("unknown variance estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VceSpec {
    pub flavor: VceFlavor,
    pub nn_neighbors: usize,
}

impl Default for VceSpec {
    fn default() -> Self {
        VceSpec { flavor: VceFlavor::Hc3, nn_neighbors: 3 }
    }
}

impl VceSpec {
    pub fn new(flavor: VceFlavor, nn_neighbors: usize) -> Result<Self> {
        if nn_neighbors == 0 {
            return Err(RdError::invalid("nearest-neighbor count must be at least 1"));
        }
        Ok(VceSpec { flavor, nn_neighbors })
    }

    pub fn hc0() -> Self {
        VceSpec { flavor: VceFlavor::Hc0, nn_neighbors: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub v_us: f64,
    pub v_rbc: f64,
    pub se_us: f64,
    pub se_rbc: f64,
}

/// Residuals on the side covered by `fit`, for every observation on that side
/// (zero elsewhere). Leverage adjustments apply inside the fit's window.
pub fn fit_residuals(sample: &Sample, fit: &SideFit, vce: &VceSpec) -> Result<Vec<f64>> {
    let n = sample.n();
    let c = sample.c();
    let mut res = vec![0.0; n];
    if vce.flavor == VceFlavor::Nn {
        let nn = nn_residuals(sample, fit.side, vce.nn_neighbors)?;
        for (i, r) in nn {
            res[i] = r;
        }
        return Ok(res);
    }
    for i in 0..n {
        if fit.side.contains(sample.x()[i], c) {
            res[i] = sample.y()[i] - fit.predict(sample.x()[i], c);
        }
    }
    match vce.flavor {
        VceFlavor::Hc0 => {}
        VceFlavor::Hc1 => {
            let df = fit.n_eff as f64 - fit.order as f64 - 1.0;
            if df <= 0.0 {
                return Err(RdError::insufficient(fit.side, "no residual degrees of freedom for HC1"));
            }
            let f = (fit.n_eff as f64 / df).sqrt();
            for &i in fit.support() {
                res[i] *= f;
            }
        }
        VceFlavor::Hc2 | VceFlavor::Hc3 => {
            let lev = fit.leverages();
            for (k, &i) in fit.support().iter().enumerate() {
                let one_minus = 1.0 - lev[k];
                if one_minus <= 1e-10 {
                    return Err(RdError::insufficient(
                        fit.side,
                        format!("leverage {:.6} at observation {i}; use a larger bandwidth", lev[k]),
                    ));
                }
                res[i] /= if vce.flavor == VceFlavor::Hc2 { one_minus.sqrt() } else { one_minus };
            }
        }
        VceFlavor::Nn => unreachable!(),
    }
    Ok(res)
}

/// Nearest-neighbor residuals sqrt(J/(J+1))·(Y_i − mean of the J closest
/// same-side outcomes). Ties in distance go to the smaller index.
pub fn nn_residuals(sample: &Sample, side: Side, j: usize) -> Result<Vec<(usize, f64)>> {
    let c = sample.c();
    let mut order: Vec<usize> = (0..sample.n()).filter(|&i| side.contains(sample.x()[i], c)).collect();
    if order.len() < j + 1 {
        return Err(RdError::insufficient(
            side,
            format!("{} observations; nearest-neighbor residuals with J = {j} need at least {}", order.len(), j + 1),
        ));
    }
    let x = sample.x();
    let y = sample.y();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let m = order.len();
    let factor = (j as f64 / (j as f64 + 1.0)).sqrt();
    let mut out = Vec::with_capacity(m);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for pos in 0..m {
        let i = order[pos];
        cand.clear();
        collect_direction(&order, x, pos, j, true, &mut cand);
        collect_direction(&order, x, pos, j, false, &mut cand);
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mean = cand[..j].iter().map(|&(_, k)| y[k]).sum::<f64>() / j as f64;
        out.push((i, factor * (y[i] - mean)));
    }
    Ok(out)
}

/// Walk away from `pos` in sorted order, keeping the first `j` points plus any
/// further points tied with the j-th distance.
fn collect_direction(order: &[usize], x: &[f64], pos: usize, j: usize, up: bool, out: &mut Vec<(f64, usize)>) {
    let xi = x[order[pos]];
    let mut taken = 0;
    let mut last = f64::NAN;
    let mut k = pos;
    loop {
        if up {
            if k + 1 >= order.len() {
                break;
            }
            k += 1;
        } else {
            if k == 0 {
                break;
            }
            k -= 1;
        }
        let d = (x[order[k]] - xi).abs();
        if taken >= j && d > last {
            break;
        }
        out.push((d, order[k]));
        taken += 1;
        last = d;
    }
}

/// Σ w_i² ε_i².
pub fn sandwich(weights: &[f64], residuals: &[f64]) -> f64 {
    weights.iter().zip(residuals).map(|(w, e)| w * w * e * e).sum()
}

#[derive(Debug, Clone)]
pub struct Residuals {
    /// Order-p residuals at h (for the undersmoothing variance).
    pub us: Vec<f64>,
    /// Order-(p+1) residuals at b (for the bias-corrected variance).
    pub rbc: Vec<f64>,
}

pub fn residuals(sample: &Sample, est: &RdEstimate, vce: &VceSpec) -> Result<Residuals> {
    let mut us = vec![0.0; sample.n()];
    let mut rbc = vec![0.0; sample.n()];
    for s in 0..2 {
        let rp = fit_residuals(sample, &est.fits_p[s], vce)?;
        let rq = fit_residuals(sample, &est.fits_q[s], vce)?;
        let side = est.fits_p[s].side;
        for i in 0..sample.n() {
            if side.contains(sample.x()[i], sample.c()) {
                us[i] = rp[i];
                rbc[i] = rq[i];
            }
        }
    }
    Ok(Residuals { us, rbc })
}

fn variance_scale(est: &RdEstimate, n: usize) -> f64 {
    let cfg = &est.config;
    n as f64 * cfg.h.powi(1 + 2 * cfg.nu as i32)
}

/// V̂ in the scaling Var(τ̂_ν) ≈ V̂/(n h^{1+2ν}).
pub fn variance_us(sample: &Sample, est: &RdEstimate, vce: &VceSpec) -> Result<f64> {
    let res = residuals(sample, est, vce)?;
    Ok(variance_scale(est, sample.n()) * sandwich(&est.weights_us(), &res.us))
}

/// V̂_BC in the same scaling, with order-(p+1) residuals at b.
pub fn variance_rbc(sample: &Sample, est: &RdEstimate, vce: &VceSpec) -> Result<f64> {
    let res = residuals(sample, est, vce)?;
    Ok(variance_scale(est, sample.n()) * sandwich(&est.weights_rbc(), &res.rbc))
}

pub fn variance(sample: &Sample, est: &RdEstimate, vce: &VceSpec) -> Result<VarianceEstimate> {
    let res = residuals(sample, est, vce)?;
    let s_us = sandwich(&est.weights_us(), &res.us);
    let s_rbc = sandwich(&est.weights_rbc(), &res.rbc);
    let scale = variance_scale(est, sample.n());
    Ok(VarianceEstimate {
        v_us: scale * s_us,
        v_rbc: scale * s_rbc,
        se_us: s_us.sqrt(),
        se_rbc: s_rbc.sqrt(),
    })
}
