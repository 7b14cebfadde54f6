//! Sample-analogue estimates of the coverage-error expansion constants.
//!
//! Every expectation of the form E[h⁻¹ g(X_i)] is replaced by (nh)⁻¹ Σ g(X_i),
//! the population Gram matrices by their sample versions at the pilot bandwidth,
//! and the errors by residuals. Pairwise and triple averages exclude coincident
//! indexes; they are evaluated in factored form with the diagonal removed.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::inference::{normal_pdf, normal_quantile};
use crate::lpfit::{dot, fit_side, global_fit, point_estimate, quad_form, FitConfig, Sample, Side};
use crate::numeric::{factorial, powers};
use crate::variance::{fit_residuals, VceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Us,
    Rbc,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::Us => "us",
            Flavor::Rbc => "rbc",
        })
    }
}

pub const Q1_TERM_NAMES: [&str; 16] = [
    "skewness_squared",
    "ell1_diagonal",
    "kurtosis_excess",
    "leverage_right",
    "leverage_left",
    "leverage_product_right",
    "leverage_product_left",
    "pair_right",
    "pair_left",
    "triple_right",
    "triple_left",
    "fourth_moment",
    "variance_fluctuation",
    "ell1_pair_variance",
    "ell1_pair_centered",
    "variance_dispersion",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeConstants {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub sigma_tilde_sq: f64,
    pub bias_tilde: f64,
    pub flavor: Flavor,
    pub pilot_h: f64,
    pub rho: f64,
    pub alpha: f64,
    /// z_{α/2} (negative for α < 1).
    pub z: f64,
    /// Third-moment average E[h⁻¹ℓ⁰³ε³].
    pub skewness: f64,
    /// The sixteen summands of Q₁ (before the 2φ(z) factor), named by `Q1_TERM_NAMES`.
    pub q1_terms: Vec<f64>,
}

/// Per-observation ingredients of the expansion constants at a pilot configuration.
#[derive(Debug, Clone)]
pub struct CeDesign {
    pub flavor: Flavor,
    pub n: usize,
    pub h: f64,
    pub b: f64,
    pub nu: usize,
    pub p: usize,
    side_of: Vec<usize>,
    uh: Vec<f64>,
    kh: Vec<f64>,
    ub: Vec<f64>,
    kb: Vec<f64>,
    ell0: Vec<f64>,
    eps: Vec<f64>,
    v: Vec<f64>,
    gp_inv: [DMatrix<f64>; 2],
    // R⁻¹ factors with Γ⁻¹ = R⁻¹R⁻ᵀ; forms r'Γ⁻¹a are evaluated as (R⁻ᵀr)·(R⁻ᵀa)
    rp_inv: [DMatrix<f64>; 2],
    // order-(p+1) Gram at b, stabilized by h: (nh)⁻¹ Σ K(X_b) r r'
    gq_inv: [DMatrix<f64>; 2],
    rq_inv: [DMatrix<f64>; 2],
    // Γ⁻¹Λ₁, Γ⁻¹Λ₂ and R⁻ᵀΛ₁ of the order-p fits
    g_lam: [DVector<f64>; 2],
    g_lam2: [DVector<f64>; 2],
    lam_hat: [DVector<f64>; 2],
    // Γ_q⁻¹Λ_q at b (stabilization free)
    gq_lam: [DVector<f64>; 2],
}

fn side_sign(s: usize) -> f64 {
    if s == 0 {
        -1.0
    } else {
        1.0
    }
}

fn outer_add(m: &mut DMatrix<f64>, r: &[f64], w: f64) {
    let d = r.len();
    for a in 0..d {
        let wa = w * r[a];
        for b in 0..d {
            m[(a, b)] += wa * r[b];
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..m.nrows()).map(|a| (0..d).map(|b| m[(a, b)] * v[b]).sum()).collect()
}

/// R⁻ᵀv for upper-triangular R⁻¹.
fn whiten(r_inv: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..v.len()).map(|a| (0..=a).map(|b| r_inv[(b, a)] * v[b]).sum()).collect()
}

/// (R⁻¹w)_j.
fn unwhiten(r_inv: &DMatrix<f64>, w: &[f64], j: usize) -> f64 {
    (j..w.len()).map(|l| r_inv[(j, l)] * w[l]).sum()
}

fn scaled(mut v: Vec<f64>, k: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x *= k);
    v
}

/// (hG·I − Σ c_k r̂_k r̂_k') v for a precomputed sum matrix.
fn shifted_apply(hg: f64, sum: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    let mv = mat_vec(sum, v);
    v.iter().zip(&mv).map(|(a, b)| hg * a - b).collect()
}

impl CeDesign {
    /// Build the design at `pilot` (h = pilot h, b = pilot b), with residuals
    /// from order-(p+1) fits at max(h, b) computed under `vce`.
    pub fn new(sample: &Sample, pilot: &FitConfig, flavor: Flavor, vce: &VceSpec) -> Result<Self> {
        let (nu, p) = (pilot.nu, pilot.p);
        let q = p + 1;
        let (h, b) = (pilot.h, pilot.b);
        let rho = h / b;
        let n = sample.n();
        let c = sample.c();
        let est = point_estimate(sample, pilot)?;
        let scale = n as f64 * h.powi(1 + nu as i32);
        let w = match flavor {
            Flavor::Us => est.weights_us(),
            Flavor::Rbc => est.weights_rbc(),
        };
        let ell0: Vec<f64> = w.iter().map(|w| w * scale).collect();

        let bw_e = h.max(b);
        let mut eps = vec![0.0; n];
        let mut v = vec![0.0; n];
        for side in Side::BOTH {
            let fit = fit_side(sample, q, pilot.kernel, bw_e, side)?;
            let r = fit_residuals(sample, &fit, vce)?;
            for i in 0..n {
                if side.contains(sample.x()[i], c) {
                    eps[i] = r[i];
                }
            }
        }
        for i in 0..n {
            if ell0[i] == 0.0 {
                continue;
            }
            let side = sample.side_of(i);
            let xi = sample.x()[i];
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..n {
                let xk = sample.x()[k];
                if !side.contains(xk, c) {
                    continue;
                }
                let wk = pilot.kernel.eval((xk - xi) / bw_e);
                if wk > 0.0 {
                    num += wk * eps[k] * eps[k];
                    den += wk;
                }
            }
            v[i] = if den > 0.0 { num / den } else { eps[i] * eps[i] };
        }

        let mut side_of = vec![0usize; n];
        let mut uh = vec![0.0; n];
        let mut kh = vec![0.0; n];
        let mut ub = vec![0.0; n];
        let mut kb = vec![0.0; n];
        for i in 0..n {
            let d = sample.x()[i] - c;
            side_of[i] = sample.side_of(i).index();
            uh[i] = d / h;
            ub[i] = d / b;
            kh[i] = pilot.kernel.eval(uh[i]);
            kb[i] = pilot.kernel.eval(ub[i]);
        }

        let fp = &est.fits_p;
        let fq = &est.fits_q;
        let sr = rho.sqrt();
        Ok(CeDesign {
            flavor,
            n,
            h,
            b,
            nu,
            p,
            side_of,
            uh,
            kh,
            ub,
            kb,
            ell0,
            eps,
            v,
            gp_inv: [fp[0].gram_inverse().clone(), fp[1].gram_inverse().clone()],
            rp_inv: [fp[0].gram_root_inverse().clone(), fp[1].gram_root_inverse().clone()],
            gq_inv: [fq[0].gram_inverse() * rho, fq[1].gram_inverse() * rho],
            rq_inv: [fq[0].gram_root_inverse() * sr, fq[1].gram_root_inverse() * sr],
            g_lam: [fp[0].gamma_lambda().clone(), fp[1].gamma_lambda().clone()],
            g_lam2: [fp[0].gamma_lambda2().clone(), fp[1].gamma_lambda2().clone()],
            lam_hat: [
                DVector::from_vec(whiten(fp[0].gram_root_inverse(), fp[0].lambda1.as_slice())),
                DVector::from_vec(whiten(fp[1].gram_root_inverse(), fp[1].lambda1.as_slice())),
            ],
            gq_lam: [fq[0].gamma_lambda().clone(), fq[1].gamma_lambda().clone()],
        })
    }

    pub fn rho(&self) -> f64 {
        self.h / self.b
    }

    pub fn ell0(&self) -> &[f64] {
        &self.ell0
    }

    pub fn residuals(&self) -> &[f64] {
        &self.eps
    }

    pub fn conditional_variance(&self) -> &[f64] {
        &self.v
    }

    pub fn side_index(&self, i: usize) -> usize {
        self.side_of[i]
    }

    pub fn tilde_dim(&self) -> usize {
        match self.flavor {
            Flavor::Us => self.p + 1,
            Flavor::Rbc => self.p + 2,
        }
    }

    /// r̃(X_{d,i}): order-p powers at h (US) or order-(p+1) powers at b (RBC).
    pub fn r_tilde(&self, i: usize) -> Vec<f64> {
        match self.flavor {
            Flavor::Us => powers(self.uh[i], self.p + 1),
            Flavor::Rbc => powers(self.ub[i], self.p + 2),
        }
    }

    /// (K r̃)(X_{d,i}).
    pub fn a_tilde(&self, i: usize) -> Vec<f64> {
        let k = match self.flavor {
            Flavor::Us => self.kh[i],
            Flavor::Rbc => self.kb[i],
        };
        let mut r = self.r_tilde(i);
        r.iter_mut().for_each(|v| *v *= k);
        r
    }

    /// G̃⁻¹ for side index s (0 = left, 1 = right).
    pub fn g_tilde_inv(&self, s: usize) -> &DMatrix<f64> {
        match self.flavor {
            Flavor::Us => &self.gp_inv[s],
            Flavor::Rbc => &self.gq_inv[s],
        }
    }

    fn white_tilde(&self, s: usize) -> &DMatrix<f64> {
        match self.flavor {
            Flavor::Us => &self.rp_inv[s],
            Flavor::Rbc => &self.rq_inv[s],
        }
    }

    fn hat_r(&self, i: usize) -> Vec<f64> {
        whiten(self.white_tilde(self.side_of[i]), &self.r_tilde(i))
    }

    fn hat_a(&self, i: usize) -> Vec<f64> {
        whiten(self.white_tilde(self.side_of[i]), &self.a_tilde(i))
    }

    fn nu_fact(&self) -> f64 {
        factorial(self.nu)
    }

    /// ℓ¹(X_i, X_j) with population averages replaced by sample averages.
    pub fn ell1(&self, i: usize, j: usize) -> f64 {
        let s = self.side_of[i];
        let (p, nu) = (self.p, self.nu);
        let q = p + 1;
        let h = self.h;
        let same = self.side_of[j] == s;
        let rpi = &self.rp_inv[s];
        // R⁻ᵀ(hΓ − 1{same} K_j r_j r_j')R⁻¹ = hI − 1{same} K_j r̂_j r̂_j'
        let r_j = whiten(rpi, &powers(self.uh[j], p + 1));
        let k_j = if same { self.kh[j] } else { 0.0 };
        let apply = |v: &[f64]| -> Vec<f64> {
            let c = k_j * dot(&r_j, v);
            v.iter().zip(&r_j).map(|(a, b)| h * a - c * b).collect()
        };
        let a_i = whiten(rpi, &scaled(powers(self.uh[i], p + 1), self.kh[i]));
        let pre = self.nu_fact() * side_sign(s);
        let mut val = pre * unwhiten(rpi, &apply(&a_i), nu);
        if self.flavor == Flavor::Rbc {
            let rqi = &self.rq_inv[s];
            let aq_i = whiten(rqi, &scaled(powers(self.ub[i], q + 1), self.kb[i]));
            let c_i = unwhiten(rqi, &aq_i, q);
            let rq_j = whiten(rqi, &powers(self.ub[j], q + 1));
            let kq_j = if same { self.kb[j] } else { 0.0 };
            let cq = kq_j * dot(&rq_j, &aq_i);
            let mq_a: Vec<f64> = aq_i.iter().zip(&rq_j).map(|(a, b)| h * a - cq * b).collect();
            let scal = unwhiten(rqi, &mq_a, q);
            let g_lam = self.g_lam[s][nu];
            let t1 = unwhiten(rpi, &apply(self.lam_hat[s].as_slice()), nu) * c_i;
            let mut t2 = -h * g_lam;
            if same {
                t2 += self.kh[j] * self.uh[j].powi(p as i32 + 1) * unwhiten(rpi, &r_j, nu);
            }
            let t3 = g_lam * scal;
            val -= self.rho().powi(p as i32 + 1) * pre * (t1 + t2 * c_i + t3);
        }
        val
    }

    /// Σ_i Σ_j f_i g_j ℓ¹(X_i, X_j) over all ordered pairs, including i = j.
    pub fn ell1_bilinear(&self, f: &[f64], g: &[f64]) -> f64 {
        let (p, nu) = (self.p, self.nu);
        let q = p + 1;
        let hg = self.h * g.iter().sum::<f64>();
        let rbc = self.flavor == Flavor::Rbc;
        let mut val = 0.0;
        for s in 0..2 {
            let rpi = &self.rp_inv[s];
            let rqi = &self.rq_inv[s];
            let mut a_g = DMatrix::<f64>::zeros(p + 1, p + 1);
            let mut a_f = vec![0.0; p + 1];
            let mut l_g = vec![0.0; p + 1];
            let mut aq_g = DMatrix::<f64>::zeros(q + 1, q + 1);
            let mut aq_f = vec![0.0; q + 1];
            for k in 0..self.n {
                if self.side_of[k] != s || (f[k] == 0.0 && g[k] == 0.0) {
                    continue;
                }
                if self.kh[k] > 0.0 {
                    let r = whiten(rpi, &powers(self.uh[k], p + 1));
                    if g[k] != 0.0 {
                        outer_add(&mut a_g, &r, g[k] * self.kh[k]);
                        if rbc {
                            let c = g[k] * self.kh[k] * self.uh[k].powi(p as i32 + 1);
                            l_g.iter_mut().zip(&r).for_each(|(a, b)| *a += c * b);
                        }
                    }
                    if f[k] != 0.0 {
                        a_f.iter_mut().zip(&r).for_each(|(a, b)| *a += f[k] * self.kh[k] * b);
                    }
                }
                if rbc && self.kb[k] > 0.0 {
                    let r = whiten(rqi, &powers(self.ub[k], q + 1));
                    if g[k] != 0.0 {
                        outer_add(&mut aq_g, &r, g[k] * self.kb[k]);
                    }
                    if f[k] != 0.0 {
                        aq_f.iter_mut().zip(&r).for_each(|(a, b)| *a += f[k] * self.kb[k] * b);
                    }
                }
            }
            let pre = self.nu_fact() * side_sign(s);
            val += pre * unwhiten(rpi, &shifted_apply(hg, &a_g, &a_f), nu);
            if rbc {
                let c_f = unwhiten(rqi, &aq_f, q);
                let g_lam = self.g_lam[s][nu];
                let t1 = unwhiten(rpi, &shifted_apply(hg, &a_g, self.lam_hat[s].as_slice()), nu) * c_f;
                let t2 = (unwhiten(rpi, &l_g, nu) - hg * g_lam) * c_f;
                let scal = unwhiten(rqi, &shifted_apply(hg, &aq_g, &aq_f), q);
                let t3 = g_lam * scal;
                val -= self.rho().powi(p as i32 + 1) * pre * (t1 + t2 + t3);
            }
        }
        val
    }

    /// Σ_{i≠j} f_i g_j ℓ¹(X_i, X_j).
    pub fn ell1_offdiagonal(&self, f: &[f64], g: &[f64]) -> f64 {
        let full = self.ell1_bilinear(f, g);
        let diag: f64 = (0..self.n)
            .filter(|&i| f[i] != 0.0 && g[i] != 0.0)
            .map(|i| f[i] * g[i] * self.ell1(i, i))
            .sum();
        full - diag
    }

    fn nh(&self) -> f64 {
        self.n as f64 * self.h
    }

    fn pair_norm(&self) -> f64 {
        let n = self.n as f64;
        n * (n - 1.0) * self.h * self.h
    }

    fn triple_norm(&self) -> f64 {
        let n = self.n as f64;
        n * (n - 1.0) * (n - 2.0) * self.h.powi(3)
    }

    /// σ̃² = E[h⁻¹ ℓ⁰² ε²].
    pub fn sigma_tilde_sq(&self) -> f64 {
        (0..self.n).map(|i| (self.ell0[i] * self.eps[i]).powi(2)).sum::<f64>() / self.nh()
    }

    /// E[h⁻¹ ℓ⁰³ ε³].
    pub fn skewness(&self) -> f64 {
        (0..self.n).map(|i| (self.ell0[i] * self.eps[i]).powi(3)).sum::<f64>() / self.nh()
    }

    /// E[h⁻¹ ℓ⁰(X_i) ℓ¹(X_i, X_i) ε_i²].
    pub fn term_ell1_diagonal(&self) -> f64 {
        (0..self.n)
            .filter(|&i| self.ell0[i] != 0.0)
            .map(|i| self.ell0[i] * self.ell1(i, i) * self.eps[i] * self.eps[i])
            .sum::<f64>()
            / self.nh()
    }

    /// E[h⁻¹ ℓ⁰⁴ (ε⁴ − v²)].
    pub fn term_kurtosis_excess(&self) -> f64 {
        (0..self.n)
            .map(|i| self.ell0[i].powi(4) * (self.eps[i].powi(4) - self.v[i] * self.v[i]))
            .sum::<f64>()
            / self.nh()
    }

    /// E[h⁻¹ ℓ⁰² r̃' G̃_s⁻¹ (K_s r̃) ε²].
    pub fn term_leverage(&self, s: usize) -> f64 {
        (0..self.n)
            .filter(|&i| self.side_of[i] == s && self.ell0[i] != 0.0)
            .map(|i| self.ell0[i].powi(2) * dot(&self.hat_r(i), &self.hat_a(i)) * self.eps[i].powi(2))
            .sum::<f64>()
            / self.nh()
    }

    /// E[h⁻¹ ℓ⁰³ 1_s r̃' ε²] G̃_s⁻¹ E[h⁻¹ (K_s r̃) ℓ⁰ ε²].
    pub fn term_leverage_product(&self, s: usize) -> f64 {
        let d = self.tilde_dim();
        let mut m1 = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for i in 0..self.n {
            if self.side_of[i] != s || self.ell0[i] == 0.0 {
                continue;
            }
            let e2 = self.eps[i].powi(2);
            let r = self.hat_r(i);
            let a = self.hat_a(i);
            for k in 0..d {
                m1[k] += self.ell0[i].powi(3) * r[k] * e2;
                m2[k] += a[k] * self.ell0[i] * e2;
            }
        }
        let nh = self.nh();
        dot(&m1, &m2) / (nh * nh)
    }

    /// E[h⁻² ℓ⁰(X_i)² 1_s(X_i) (r̃_i' G̃_s⁻¹ (K_s r̃)_j)² ε_j²] over i ≠ j.
    pub fn term_pair(&self, s: usize) -> f64 {
        let d = self.tilde_dim();
        let mut m = DMatrix::<f64>::zeros(d, d);
        for j in 0..self.n {
            if self.side_of[j] != s || self.eps[j] == 0.0 {
                continue;
            }
            let a = self.hat_a(j);
            if a.iter().all(|v| *v == 0.0) {
                continue;
            }
            outer_add(&mut m, &a, self.eps[j].powi(2));
        }
        let mut total = 0.0;
        for i in 0..self.n {
            if self.side_of[i] != s || self.ell0[i] == 0.0 {
                continue;
            }
            let r = self.hat_r(i);
            let self_form = dot(&r, &self.hat_a(i));
            total += self.ell0[i].powi(2) * (quad_form(&m, &r) - self_form * self_form * self.eps[i].powi(2));
        }
        total / self.pair_norm()
    }

    /// E[h⁻³ ℓ⁰_j² (r̃_j'G̃_s⁻¹(K_s r̃)_i) ℓ⁰_i (r̃_j'G̃_s⁻¹(K_s r̃)_k) ℓ⁰_k ε_i² ε_k²], i, j, k distinct.
    pub fn term_triple(&self, s: usize) -> f64 {
        let d = self.tilde_dim();
        let mut alpha: Vec<Option<Vec<f64>>> = vec![None; self.n];
        let mut sum = vec![0.0; d];
        let mut outer = DMatrix::<f64>::zeros(d, d);
        for i in 0..self.n {
            if self.side_of[i] != s || self.ell0[i] == 0.0 {
                continue;
            }
            let a = self.hat_a(i);
            if a.iter().all(|v| *v == 0.0) {
                continue;
            }
            let al = scaled(a, self.ell0[i] * self.eps[i].powi(2));
            sum.iter_mut().zip(&al).for_each(|(x, y)| *x += y);
            outer_add(&mut outer, &al, 1.0);
            alpha[i] = Some(al);
        }
        let mut total = 0.0;
        for j in 0..self.n {
            if self.side_of[j] != s || self.ell0[j] == 0.0 {
                continue;
            }
            let r = self.hat_r(j);
            let own = alpha[j].as_ref().map(|a| dot(&r, a)).unwrap_or(0.0);
            let rs = dot(&r, &sum) - own;
            total += self.ell0[j].powi(2) * (rs * rs - quad_form(&outer, &r) + own * own);
        }
        total / self.triple_norm()
    }

    /// E[h⁻¹ ℓ⁰⁴ ε⁴].
    pub fn term_fourth_moment(&self) -> f64 {
        (0..self.n).map(|i| (self.ell0[i] * self.eps[i]).powi(4)).sum::<f64>() / self.nh()
    }

    /// E[ℓ⁰² v] (no h⁻¹ factor).
    fn mean_ell0sq_v(&self) -> f64 {
        (0..self.n).map(|i| self.ell0[i].powi(2) * self.v[i]).sum::<f64>() / self.n as f64
    }

    /// E[h⁻¹ (ℓ⁰²v − E[ℓ⁰²v]) ℓ⁰² ε²].
    pub fn term_variance_fluctuation(&self) -> f64 {
        let m = self.mean_ell0sq_v();
        (0..self.n)
            .map(|i| {
                let l2 = self.ell0[i].powi(2);
                (l2 * self.v[i] - m) * l2 * self.eps[i].powi(2)
            })
            .sum::<f64>()
            / self.nh()
    }

    /// E[h⁻² ℓ¹(X_i,X_j) ℓ⁰_i ℓ⁰_j² ε_j² v_i], i ≠ j.
    pub fn term_ell1_pair_variance(&self) -> f64 {
        let f: Vec<f64> = (0..self.n).map(|i| self.ell0[i] * self.v[i]).collect();
        let g: Vec<f64> = (0..self.n).map(|j| self.ell0[j].powi(2) * self.eps[j].powi(2)).collect();
        self.ell1_offdiagonal(&f, &g) / self.pair_norm()
    }

    /// E[h⁻² ℓ¹(X_i,X_j) ℓ⁰_i (ℓ⁰_j² v_j − E[ℓ⁰²v]) ε_i²], i ≠ j.
    pub fn term_ell1_pair_centered(&self) -> f64 {
        let m = self.mean_ell0sq_v();
        let f: Vec<f64> = (0..self.n).map(|i| self.ell0[i] * self.eps[i].powi(2)).collect();
        let g: Vec<f64> = (0..self.n).map(|j| self.ell0[j].powi(2) * self.v[j] - m).collect();
        self.ell1_offdiagonal(&f, &g) / self.pair_norm()
    }

    /// E[h⁻¹ (ℓ⁰²v − E[ℓ⁰²v])²].
    pub fn term_variance_dispersion(&self) -> f64 {
        let m = self.mean_ell0sq_v();
        (0..self.n).map(|i| (self.ell0[i].powi(2) * self.v[i] - m).powi(2)).sum::<f64>() / self.nh()
    }

    /// The sixteen Q₁ summands at z, including their σ̃ powers and z polynomials.
    pub fn q1_terms(&self, z: f64) -> Vec<f64> {
        let s2 = self.sigma_tilde_sq();
        let s4 = s2 * s2;
        let s6 = s4 * s2;
        let skew = self.skewness();
        let z2 = z * z;
        let z3 = z2 * z;
        vec![
            skew * skew / s6 * (z3 / 3.0 + 7.0 * z / 4.0 + z * (z2 - 3.0) / 4.0),
            self.term_ell1_diagonal() / s2 * (-z * (z2 - 3.0) / 2.0),
            self.term_kurtosis_excess() / s4 * (z * (z2 - 3.0) / 8.0),
            -self.term_leverage(1) / s2 * (z * (z2 - 1.0) / 2.0),
            -self.term_leverage(0) / s2 * (z * (z2 - 1.0) / 2.0),
            -self.term_leverage_product(1) / s4 * (z * (z2 - 1.0)),
            -self.term_leverage_product(0) / s4 * (z * (z2 - 1.0)),
            self.term_pair(1) / s2 * (z * (z2 - 1.0) / 4.0),
            self.term_pair(0) / s2 * (z * (z2 - 1.0) / 4.0),
            self.term_triple(1) / s4 * (z * (z2 - 1.0) / 2.0),
            self.term_triple(0) / s4 * (z * (z2 - 1.0) / 2.0),
            self.term_fourth_moment() / s4 * (-z * (z2 - 3.0) / 24.0),
            self.term_variance_fluctuation() / s4 * (z * (z2 - 1.0) / 4.0),
            self.term_ell1_pair_variance() / s4 * (z * (z2 - 3.0)),
            self.term_ell1_pair_centered() / s4 * (-z),
            self.term_variance_dispersion() / s4 * (-z * (z2 + 1.0) / 8.0),
        ]
    }

    /// Fixed-n leading bias constant given derivative estimates μ^{(p+1)}, μ^{(p+2)}
    /// per side (index 0 = left).
    pub fn bias_tilde(&self, mu_p1: [f64; 2], mu_p2: [f64; 2]) -> f64 {
        let (nu, p) = (self.nu, self.p);
        let mut total = 0.0;
        for s in 0..2 {
            let g_lam = self.g_lam[s][nu];
            let term = match self.flavor {
                Flavor::Us => g_lam * mu_p1[s] / factorial(p + 1),
                Flavor::Rbc => {
                    let inner = self.g_lam2[s][nu] - g_lam * self.gq_lam[s][p + 1] / self.rho();
                    inner * mu_p2[s] / factorial(p + 2)
                }
            };
            total += side_sign(s) * factorial(nu) * term;
        }
        total
    }
}

/// ℓ⁰ evaluated at each sample point.
pub fn ell0(sample: &Sample, config: &FitConfig, flavor: Flavor) -> Result<Vec<f64>> {
    let est = point_estimate(sample, config)?;
    let scale = sample.n() as f64 * config.h.powi(1 + config.nu as i32);
    let w = match flavor {
        Flavor::Us => est.weights_us(),
        Flavor::Rbc => est.weights_rbc(),
    };
    Ok(w.into_iter().map(|w| w * scale).collect())
}

/// ℓ⁰ evaluated at an arbitrary score x using the sample matrices.
pub fn ell0_at(sample: &Sample, config: &FitConfig, flavor: Flavor, x: f64) -> Result<f64> {
    let est = point_estimate(sample, config)?;
    let side = if x >= sample.c() { Side::Right } else { Side::Left };
    let s = side.index();
    let (nu, p) = (config.nu, config.p);
    let fp = &est.fits_p[s];
    let d = x - sample.c();
    let uh = d / config.h;
    let kh = config.kernel.eval(uh);
    let mut vec_p: Vec<f64> = powers(uh, p + 1).into_iter().map(|v| v * kh).collect();
    if flavor == Flavor::Rbc {
        let fq = &est.fits_q[s];
        let ub = d / config.b;
        let kb = config.kernel.eval(ub);
        if kb > 0.0 {
            let aq: Vec<f64> = powers(ub, p + 2).into_iter().map(|v| v * kb).collect();
            let gq_inv_h = fq.gram_inverse() * config.rho();
            let c = mat_vec(&gq_inv_h, &aq)[p + 1];
            let coef = config.rho().powi(p as i32 + 1) * c;
            for a in 0..=p {
                vec_p[a] -= coef * fp.lambda1[a];
            }
        }
    }
    Ok(side.sign() * factorial(nu) * mat_vec(fp.gram_inverse(), &vec_p)[nu])
}

/// Derivatives μ^{(p+1)} and μ^{(p+2)} on each side from global polynomials of order p+4.
pub fn global_derivatives(sample: &Sample, p: usize) -> Result<([f64; 2], [f64; 2])> {
    let order = p + 4;
    let mut d1 = [0.0; 2];
    let mut d2 = [0.0; 2];
    for side in Side::BOTH {
        if sample.count(side) < p + 6 {
            return Err(RdError::insufficient(
                side,
                format!("global polynomial of order {order} needs at least {} observations", p + 6),
            ));
        }
        let fit = global_fit(sample, order, side)?;
        d1[side.index()] = fit.derivative(p + 1);
        d2[side.index()] = fit.derivative(p + 2);
    }
    Ok((d1, d2))
}

/// Assemble 𝒬₁, 𝒬₂, 𝒬₃ from a design, a bias constant and α.
pub fn assemble(design: &CeDesign, bias_tilde: f64, alpha: f64) -> Result<CeConstants> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RdError::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = normal_quantile(alpha / 2.0);
    let phi2 = 2.0 * normal_pdf(z);
    let s2 = design.sigma_tilde_sq();
    if !(s2 > 0.0 && s2.is_finite()) {
        return Err(RdError::numerical(format!("sigma_tilde^2 = {s2} is not positive")));
    }
    let skew = design.skewness();
    let terms = design.q1_terms(z);
    for (name, t) in Q1_TERM_NAMES.iter().zip(&terms) {
        if !t.is_finite() {
            return Err(RdError::numerical(format!("coverage-error term '{name}' is not finite")));
        }
    }
    let q1_poly: f64 = terms.iter().sum();
    let q2_poly = -z / (2.0 * s2);
    let q3_poly = skew / (s2 * s2) * z.powi(3) / 3.0;
    let out = CeConstants {
        q1: phi2 * q1_poly,
        q2: phi2 * q2_poly * bias_tilde * bias_tilde,
        q3: phi2 * q3_poly * bias_tilde,
        sigma_tilde_sq: s2,
        bias_tilde,
        flavor: design.flavor,
        pilot_h: design.h,
        rho: design.rho(),
        alpha,
        z,
        skewness: skew,
        q1_terms: terms,
    };
    for (name, v) in [("q1", out.q1), ("q2", out.q2), ("q3", out.q3), ("bias_tilde", bias_tilde)] {
        if !v.is_finite() {
            return Err(RdError::numerical(format!("coverage-error constant {name} is not finite")));
        }
    }
    Ok(out)
}

pub fn estimate_ce_constants(
    sample: &Sample,
    pilot: &FitConfig,
    flavor: Flavor,
    vce: &VceSpec,
    alpha: f64,
) -> Result<CeConstants> {
    let (mu1, mu2) = global_derivatives(sample, pilot.p)?;
    let design = CeDesign::new(sample, pilot, flavor, vce)?;
    let bias = design.bias_tilde(mu1, mu2);
    assemble(&design, bias, alpha)
}
