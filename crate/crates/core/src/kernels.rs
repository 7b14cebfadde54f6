//! Kernel functions, boundary equivalent kernels and the L2-optimal bandwidth ratio.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::numeric::{golden_section, integrate, powers, spd_inverse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Uniform,
    Triangular,
    Epanechnikov,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Uniform, Kernel::Triangular, Kernel::Epanechnikov];

    /// One-sided profile k(u), zero outside [0, 1].
    #[inline]
    pub fn one_sided(self, u: f64) -> f64 {
        if !(0.0..=1.0).contains(&u) {
            return 0.0;
        }
        match self {
            Kernel::Uniform => 1.0,
            Kernel::Triangular => 1.0 - u,
            Kernel::Epanechnikov => 1.0 - u * u,
        }
    }

    /// Two-sided kernel K(u) = k(|u|).
    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        self.one_sided(u.abs())
    }

    /// Closed form of the one-sided moment ∫_0^1 k(u) u^m du.
    pub fn moment(self, m: usize) -> f64 {
        let m = m as f64;
        match self {
            Kernel::Uniform => 1.0 / (m + 1.0),
            Kernel::Triangular => 1.0 / (m + 1.0) - 1.0 / (m + 2.0),
            Kernel::Epanechnikov => 1.0 / (m + 1.0) - 1.0 / (m + 3.0),
        }
    }

    /// Normal-reference constant for the variance pilot bandwidth.
    pub fn pilot_constant(self) -> f64 {
        match self {
            Kernel::Uniform => 1.843,
            Kernel::Triangular => 2.576,
            Kernel::Epanechnikov => 2.34,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Kernel::Uniform => "uniform",
            Kernel::Triangular => "triangular",
            Kernel::Epanechnikov => "epanechnikov",
        };
        f.write_str(s)
    }
}

impl FromStr for Kernel {
    type Err = RdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" | "uni" => Ok(Kernel::Uniform),
            "triangular" | "tri" => Ok(Kernel::Triangular),
            "epanechnikov" | "epa" => Ok(Kernel::Epanechnikov),
            other => Err(RdError::invalid(format!("unknown kernel '{other}'"))),
        }
    }
}

pub fn eval_kernel(kernel: Kernel, u: f64) -> f64 {
    kernel.eval(u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalentKernelSpec {
    pub p: usize,
    pub kernel: Kernel,
    pub rho: f64,
}

/// ∫_0^1 k(u) r(u) r(u)' du for r of length `dim`.
fn limit_gram(kernel: Kernel, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |a, b| kernel.moment(a + b))
}

/// Bias-corrected boundary equivalent kernel, precomputed for repeated evaluation.
#[derive(Debug, Clone)]
pub struct EquivalentKernel {
    spec: EquivalentKernelSpec,
    main_row: Vec<f64>,
    corr_row: Vec<f64>,
}

impl EquivalentKernel {
    pub fn new(spec: EquivalentKernelSpec) -> Result<Self> {
        if !(spec.rho > 0.0 && spec.rho.is_finite()) {
            return Err(RdError::invalid(format!("rho must be positive, got {}", spec.rho)));
        }
        let p = spec.p;
        let q = p + 1;
        let gp_inv = spd_inverse(&limit_gram(spec.kernel, p + 1))
            .ok_or_else(|| RdError::numerical("singular limiting Gram matrix of order p"))?;
        let gq_inv = spd_inverse(&limit_gram(spec.kernel, q + 1))
            .ok_or_else(|| RdError::numerical("singular limiting Gram matrix of order p+1"))?;
        let main_row: Vec<f64> = (0..=p).map(|j| gp_inv[(0, j)]).collect();
        let lam: Vec<f64> = (0..=p).map(|j| spec.kernel.moment(j + p + 1)).collect();
        let scale: f64 = main_row.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>()
            * spec.rho.powi(p as i32 + 2);
        let corr_row: Vec<f64> = (0..=q).map(|j| scale * gq_inv[(q, j)]).collect();
        Ok(EquivalentKernel { spec, main_row, corr_row })
    }

    pub fn spec(&self) -> EquivalentKernelSpec {
        self.spec
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut val = 0.0;
        let k = self.spec.kernel.one_sided(x);
        if k > 0.0 {
            let r = powers(x, self.main_row.len());
            val += k * dot(&self.main_row, &r);
        }
        let xb = self.spec.rho * x;
        let kb = self.spec.kernel.one_sided(xb);
        if kb > 0.0 {
            let r = powers(xb, self.corr_row.len());
            val -= kb * dot(&self.corr_row, &r);
        }
        val
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn equivalent_kernel_bc(spec: EquivalentKernelSpec, x: f64) -> Result<f64> {
    Ok(EquivalentKernel::new(spec)?.eval(x))
}

/// Uniform-kernel equivalent kernel of order `order` on [0, 1].
#[derive(Debug, Clone)]
struct UniformEquivalent {
    row: Vec<f64>,
}

impl UniformEquivalent {
    fn new(order: usize) -> Result<Self> {
        let inv = spd_inverse(&limit_gram(Kernel::Uniform, order + 1))
            .ok_or_else(|| RdError::numerical("singular uniform Gram matrix"))?;
        Ok(UniformEquivalent {
            row: (0..=order).map(|j| inv[(0, j)]).collect(),
        })
    }

    fn eval(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        dot(&self.row, &powers(x, self.row.len()))
    }
}

const PANEL_ORDER: usize = 24;

/// Squared L2 distance between the bias-corrected equivalent kernel and the
/// optimal order-(p+1) kernel. Each smooth piece is split into `subdivisions`
/// Gauss-Legendre panels.
pub fn l2_distance(p: usize, kernel: Kernel, rho: f64, subdivisions: usize) -> Result<f64> {
    let ek = EquivalentKernel::new(EquivalentKernelSpec { p, kernel, rho })?;
    let target = UniformEquivalent::new(p + 1)?;
    let mut breaks = vec![0.0, 1.0, 1.0 / rho];
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += integrate(
            |x| {
                let d = ek.eval(x) - target.eval(x);
                d * d
            },
            w[0],
            w[1],
            subdivisions.max(1),
            PANEL_ORDER,
        );
    }
    Ok(total)
}

/// Bandwidth ratio ρ = h/b minimizing the L2 distance above (for ν = 0).
pub fn optimal_rho(p: usize, kernel: Kernel) -> Result<f64> {
    optimal_rho_with(p, kernel, 1)
}

pub fn optimal_rho_with(p: usize, kernel: Kernel, subdivisions: usize) -> Result<f64> {
    if p > 3 {
        return Err(RdError::invalid(format!("optimal rho is available for p <= 3, got p = {p}")));
    }
    let obj = |rho: f64| l2_distance(p, kernel, rho, subdivisions).unwrap_or(f64::INFINITY);
    let (lo, hi, step): (f64, f64, f64) = (0.3, 3.0, 0.01);
    let steps = ((hi - lo) / step).round() as usize;
    let mut best = (lo, f64::INFINITY);
    for i in 0..=steps {
        let rho = lo + i as f64 * step;
        let v = obj(rho);
        if v < best.1 {
            best = (rho, v);
        }
    }
    let a = (best.0 - step).max(lo);
    let b = (best.0 + step).min(hi);
    let (rho, _) = golden_section(obj, a, b, 1e-12);
    if !rho.is_finite() || rho <= lo + 1e-9 || rho >= hi - 1e-9 {
        return Err(RdError::numerical(format!(
            "optimal rho search did not converge inside [{lo}, {hi}] (last bracket [{a}, {b}])"
        )));
    }
    Ok(rho)
}
