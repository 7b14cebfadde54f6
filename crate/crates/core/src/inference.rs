//! Studentized statistics and the undersmoothing / robust bias-corrected intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{RdError, Result};
use crate::lpfit::{point_estimate, FitConfig, RdEstimate, Sample};
use crate::variance::{variance, VarianceEstimate, VceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    Us,
    Rbc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: IntervalMethod,
    pub point: f64,
    pub se: f64,
    pub h_used: f64,
    pub b_used: f64,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_quantile(prob: f64) -> f64 {
    std_normal().inverse_cdf(prob)
}

pub fn normal_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

pub fn normal_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RdError::invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Two-sided critical value z_{1-α/2}; zero at α = 1.
pub fn z_critical(alpha: f64) -> f64 {
    if alpha >= 1.0 {
        0.0
    } else {
        normal_quantile(1.0 - alpha / 2.0)
    }
}

fn interval(method: IntervalMethod, point: f64, se: f64, alpha: f64, cfg: &FitConfig) -> ConfidenceInterval {
    let half = z_critical(alpha) * se;
    ConfidenceInterval {
        lower: point - half,
        upper: point + half,
        level: 1.0 - alpha,
        method,
        point,
        se,
        h_used: cfg.h,
        b_used: cfg.b,
    }
}

/// Point estimates, variances and both intervals from one set of fits.
#[derive(Debug, Clone)]
pub struct Inference {
    pub estimate: RdEstimate,
    pub variance: VarianceEstimate,
    pub us: ConfidenceInterval,
    pub rbc: ConfidenceInterval,
}

impl Inference {
    pub fn t_statistics(&self, tau0: f64) -> Result<(f64, f64)> {
        if !(self.variance.se_us > 0.0 && self.variance.se_rbc > 0.0) {
            return Err(RdError::numerical("zero standard error; t-statistics undefined"));
        }
        Ok((
            (self.estimate.tau_us - tau0) / self.variance.se_us,
            (self.estimate.tau_rbc - tau0) / self.variance.se_rbc,
        ))
    }
}

pub fn infer(sample: &Sample, config: &FitConfig, vce: &VceSpec, alpha: f64) -> Result<Inference> {
    check_alpha(alpha)?;
    let estimate = point_estimate(sample, config)?;
    let var = variance(sample, &estimate, vce)?;
    let us = interval(IntervalMethod::Us, estimate.tau_us, var.se_us, alpha, config);
    let rbc = interval(IntervalMethod::Rbc, estimate.tau_rbc, var.se_rbc, alpha, config);
    Ok(Inference { estimate, variance: var, us, rbc })
}

pub fn ci_us(sample: &Sample, config: &FitConfig, vce: &VceSpec, alpha: f64) -> Result<ConfidenceInterval> {
    Ok(infer(sample, config, vce, alpha)?.us)
}

pub fn ci_rbc(sample: &Sample, config: &FitConfig, vce: &VceSpec, alpha: f64) -> Result<ConfidenceInterval> {
    Ok(infer(sample, config, vce, alpha)?.rbc)
}

/// (T, T_RBC) for the null τ_ν = tau0.
pub fn t_statistics(sample: &Sample, config: &FitConfig, vce: &VceSpec, tau0: f64) -> Result<(f64, f64)> {
    infer(sample, config, vce, 0.05)?.t_statistics(tau0)
}
