#![allow(dead_code)]


use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{Float, One, Signed, ToPrimitive, Zero};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdce::cecoef::{CeDesign, Flavor};
use rdce::inference::z_critical;
use rdce::lpfit::fit_side;
use rdce::variance::{variance, VceFlavor, VceSpec};
use rdce::{infer, point_estimate, FitConfig, Kernel, Sample, Side};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

pub fn random_kernel<R: Rng>(r: &mut R) -> Kernel {
    Kernel::ALL[r.random_range(0..3)]
}

/// Small random design: scores on [-1, 1] around a random cutoff, smooth outcome with noise.
pub fn random_sample<R: Rng>(r: &mut R, n_min: usize, n_max: usize) -> Sample {
    let n = r.random_range(n_min..=n_max);
    let c = r.random_range(-0.2..0.2);
    let jump = r.random_range(-2.0..2.0);
    let slope = r.random_range(-1.5..1.5);
    let curv = r.random_range(-2.0..2.0);
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| {
            let d = v - c;
            1.0 + slope * d + curv * d * d + if v >= c { jump } else { 0.0 } + r.random_range(-0.5..0.5)
        })
        .collect();
    Sample::new(x, y, c).unwrap()
}

/// Random (sample, config) pair on which both fits succeed, with p ≤ 3.
pub fn random_instance<R: Rng>(r: &mut R, n_max: usize) -> (Sample, FitConfig) {
    loop {
        let s = random_sample(r, 24, n_max);
        let p = r.random_range(1..=3);
        let nu = r.random_range(0..=p.min(2));
        let kernel = random_kernel(r);
        let h = r.random_range(0.6..2.0);
        let b = r.random_range(0.6..2.0);
        let cfg = FitConfig::new(nu, p, kernel, h, b).unwrap();
        if let Ok(est) = point_estimate(&s, &cfg) {
            if est.fits_p.iter().chain(&est.fits_q).all(|f| gram_condition(&f.gram) < max_condition()) {
                return (s, cfg);
            }
        }
    }
}

/// Condition-number cap on the scaled Gram matrices of random instances: at
/// 1e-9 relative agreement, near-singular windows only compare rounding noise.
pub fn max_condition() -> f64 {
    std::env::var("RDCE_MAX_COND").ok().and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY)
}

pub fn gram_condition(g: &DMatrix<f64>) -> f64 {
    let sv = g.clone().singular_values();
    sv.max() / sv.min()
}

/// Common power-of-two scale making every input an integer: v = int · 2^-shift.
fn dyadic_shift(values: &[f64]) -> i64 {
    values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| -(v.integer_decode().1 as i64))
        .max()
        .unwrap_or(0)
        .max(0)
}

fn to_int(v: f64, shift: i64) -> BigInt {
    let (m, e, sign) = v.integer_decode();
    let e = e as i64 + shift;
    let m = BigInt::from(m) * BigInt::from(sign);
    if e >= 0 {
        m << e as usize
    } else {
        // only reached for trailing-zero mantissa bits
        m >> (-e) as usize
    }
}

/// num · 2^shift / den, rounded once.
fn ratio_f64(num: BigInt, den: &BigInt, shift: i64) -> f64 {
    let (num, den) = if shift >= 0 { (num << shift as usize, den.clone()) } else { (num, den.clone() << (-shift) as usize) };
    Ratio::new(num, den).to_f64().expect("representable")
}

/// Fraction-free (Bareiss) determinant.
fn det_int(mut m: Vec<Vec<BigInt>>) -> BigInt {
    let n = m.len();
    if n == 0 {
        return BigInt::one();
    }
    let mut sign = BigInt::one();
    let mut prev = BigInt::one();
    for k in 0..n - 1 {
        if m[k][k].is_zero() {
            match (k + 1..n).find(|&r| !m[r][k].is_zero()) {
                Some(r) => {
                    m.swap(k, r);
                    sign = -sign;
                }
                None => return BigInt::zero(),
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                m[i][j] = (&m[i][j] * &m[k][k] - &m[i][k] * &m[k][j]) / &prev;
            }
        }
        prev = m[k][k].clone();
    }
    sign * &m[n - 1][n - 1]
}

/// (adjugate, determinant) of an integer matrix.
fn adjugate(g: &[Vec<BigInt>]) -> (Vec<Vec<BigInt>>, BigInt) {
    let d = g.len();
    let det = det_int(g.to_vec());
    let adj = (0..d)
        .map(|j| {
            (0..d)
                .map(|i| {
                    let minor: Vec<Vec<BigInt>> = (0..d)
                        .filter(|&r| r != i)
                        .map(|r| (0..d).filter(|&c| c != j).map(|c| g[r][c].clone()).collect())
                        .collect();
                    let v = det_int(minor);
                    if (i + j) % 2 == 0 {
                        v
                    } else {
                        -v
                    }
                })
                .collect()
        })
        .collect();
    (adj, det)
}

fn window(s: &Sample, kernel: Kernel, bw: f64, side: Side) -> Vec<usize> {
    let c = s.c();
    (0..s.n()).filter(|&i| side.contains(s.x()[i], c) && kernel.eval((s.x()[i] - c) / bw) > 0.0).collect()
}

/// Exact integer design of one window: D = (x - c)·2^shift, kernel weights up to
/// a common positive factor, regressors D^j.
struct IntDesign {
    idx: Vec<usize>,
    shift: i64,
    d: Vec<BigInt>,
    w: Vec<BigInt>,
    r: Vec<Vec<BigInt>>,
    bw: BigInt,
    adj: Vec<Vec<BigInt>>,
    det: BigInt,
}

impl IntDesign {
    fn new(s: &Sample, order: usize, kernel: Kernel, bw: f64, side: Side) -> IntDesign {
        let idx = window(s, kernel, bw, side);
        let mut vals: Vec<f64> = idx.iter().flat_map(|&i| [s.x()[i], s.y()[i]]).collect();
        vals.extend([s.c(), bw]);
        let shift = dyadic_shift(&vals);
        let c = to_int(s.c(), shift);
        let bw_i = to_int(bw, shift);
        let d: Vec<BigInt> = idx.iter().map(|&i| to_int(s.x()[i], shift) - &c).collect();
        let w: Vec<BigInt> = d
            .iter()
            .map(|v| match kernel {
                Kernel::Uniform => BigInt::one(),
                Kernel::Triangular => &bw_i - v.abs(),
                Kernel::Epanechnikov => &bw_i * &bw_i - v * v,
            })
            .collect();
        let r: Vec<Vec<BigInt>> = d.iter().map(|v| (0..=order).map(|j| num_traits::pow(v.clone(), j)).collect()).collect();
        let dim = order + 1;
        let mut g = vec![vec![BigInt::zero(); dim]; dim];
        for (rk, wk) in r.iter().zip(&w) {
            for a in 0..dim {
                let wa = wk * &rk[a];
                for b in 0..dim {
                    g[a][b] += &wa * &rk[b];
                }
            }
        }
        let (adj, det) = adjugate(&g);
        IntDesign { idx, shift, d, w, r, bw: bw_i, adj, det }
    }

    /// Numerator of (G⁻¹ Σ_k w_k r_k t_k)_j over `det`, for integer targets t.
    fn solve_num(&self, j: usize, t: &[BigInt]) -> BigInt {
        let dim = self.adj.len();
        let mut rhs = vec![BigInt::zero(); dim];
        for (k, tk) in t.iter().enumerate() {
            let wt = &self.w[k] * tk;
            for (l, v) in rhs.iter_mut().enumerate() {
                *v += &wt * &self.r[k][l];
            }
        }
        (0..dim).fold(BigInt::zero(), |a, l| a + &self.adj[j][l] * &rhs[l])
    }
}

/// Weighted regression on one side in raw powers of (x - c), solved exactly in
/// integer arithmetic and rounded once at the end.
pub struct DenseFit {
    pub idx: Vec<usize>,
    pub beta: DVector<f64>,
    /// (X'WX)⁻¹X'W: row j gives the weights of coefficient j.
    pub coef_map: DMatrix<f64>,
    pub leverage: Vec<f64>,
}

pub fn dense_fit(s: &Sample, order: usize, kernel: Kernel, bw: f64, side: Side) -> DenseFit {
    let des = IntDesign::new(s, order, kernel, bw, side);
    let dim = order + 1;
    let m = des.idx.len();
    // numerators of the coefficient map for integer regressors
    let num: Vec<Vec<BigInt>> = (0..dim)
        .map(|j| {
            (0..m)
                .map(|k| (0..dim).fold(BigInt::zero(), |a, l| a + &des.adj[j][l] * &des.r[k][l]) * &des.w[k])
                .collect()
        })
        .collect();
    let sh = des.shift;
    let coef_map = DMatrix::from_fn(dim, m, |j, k| ratio_f64(num[j][k].clone(), &des.det, sh * j as i64));
    let y: Vec<BigInt> = des.idx.iter().map(|&i| to_int(s.y()[i], sh)).collect();
    let beta = DVector::from_fn(dim, |j, _| ratio_f64(des.solve_num(j, &y), &des.det, sh * (j as i64 - 1)));
    let leverage = (0..m)
        .map(|k| ratio_f64((0..dim).fold(BigInt::zero(), |a, j| a + &des.r[k][j] * &num[j][k]), &des.det, 0))
        .collect();
    DenseFit { idx: des.idx, beta, coef_map, leverage }
}

/// Residuals for every observation on the fit's side (zero elsewhere); leverage
/// and degrees-of-freedom adjustments apply inside the kernel window only.
pub fn dense_residuals(s: &Sample, fit: &DenseFit, side: Side, flavor: VceFlavor) -> Vec<f64> {
    let m = fit.idx.len();
    let dim = fit.beta.len();
    let mut out = vec![0.0; s.n()];
    for i in 0..s.n() {
        if side.contains(s.x()[i], s.c()) {
            let d = s.x()[i] - s.c();
            out[i] = s.y()[i] - fit.beta.iter().rev().fold(0.0, |acc, b| acc * d + b);
        }
    }
    for (k, &i) in fit.idx.iter().enumerate() {
        out[i] = match flavor {
            VceFlavor::Hc0 => out[i],
            VceFlavor::Hc1 => out[i] * (m as f64 / (m - dim) as f64).sqrt(),
            VceFlavor::Hc2 => out[i] / (1.0 - fit.leverage[k]).sqrt(),
            VceFlavor::Hc3 => out[i] / (1.0 - fit.leverage[k]),
            VceFlavor::Nn => unreachable!(),
        };
    }
    out
}

/// Scaled bias-constant contrast (Γ⁻¹Λ)_ν, exact: regress D^{p+1} on D^j and
/// rescale by (h·2^shift)^{ν-p-1}.
fn dense_gamma_lambda(s: &Sample, p: usize, nu: usize, kernel: Kernel, h: f64, side: Side) -> f64 {
    let des = IntDesign::new(s, p, kernel, h, side);
    let t: Vec<BigInt> = des.d.iter().map(|v| num_traits::pow(v.clone(), p + 1)).collect();
    let den = &des.det * num_traits::pow(des.bw.clone(), p + 1 - nu);
    ratio_f64(des.solve_num(nu, &t), &den, 0)
}

/// Dense weights (w_US, w_BC) over the full sample.
pub fn dense_weights(s: &Sample, cfg: &FitConfig) -> (Vec<f64>, Vec<f64>) {
    let (nu, p) = (cfg.nu, cfg.p);
    let mut wus = vec![0.0; s.n()];
    let mut wbc = vec![0.0; s.n()];
    for side in Side::BOTH {
        let fp = dense_fit(s, p, cfg.kernel, cfg.h, side);
        let fq = dense_fit(s, p + 1, cfg.kernel, cfg.b, side);
        let sg = side.sign() * factorial(nu);
        for (k, &i) in fp.idx.iter().enumerate() {
            wus[i] += sg * fp.coef_map[(nu, k)];
            wbc[i] += sg * fp.coef_map[(nu, k)];
        }
        let gl = dense_gamma_lambda(s, p, nu, cfg.kernel, cfg.h, side);
        let scale = sg * gl * cfg.h.powi((p + 1 - nu) as i32);
        for (k, &i) in fq.idx.iter().enumerate() {
            wbc[i] -= scale * fq.coef_map[(p + 1, k)];
        }
    }
    (wus, wbc)
}

pub fn check_fit_oracle(s: &Sample, cfg: &FitConfig, tol: f64) -> Result<(), String> {
    for side in Side::BOTH {
        for (order, bw) in [(cfg.p, cfg.h), (cfg.p + 1, cfg.b)] {
            let fit = fit_side(s, order, cfg.kernel, bw, side).map_err(|e| e.to_string())?;
            let dense = dense_fit(s, order, cfg.kernel, bw, side);
            let scale = dense.beta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for j in 0..=order {
                let tol_j = tol * (1.0 + scale) * bw.powi(-(j as i32)).max(1.0);
                if (fit.beta[j] - dense.beta[j]).abs() > tol_j {
                    return Err(format!("beta[{j}] {} vs {} ({side}, order {order})", fit.beta[j], dense.beta[j]));
                }
            }
            let lev = fit.leverages();
            for (a, b) in lev.iter().zip(&dense.leverage) {
                if !rel_close(*a, *b, tol) {
                    return Err(format!("leverage {a} vs {b}"));
                }
            }
        }
    }
    Ok(())
}

pub fn check_variance_oracle(s: &Sample, cfg: &FitConfig, flavor: VceFlavor, tol: f64) -> Result<(), String> {
    let est = point_estimate(s, cfg).map_err(|e| e.to_string())?;
    let vce = VceSpec::new(flavor, 3).unwrap();
    let v = match variance(s, &est, &vce) {
        Ok(v) => v,
        // near-singular leverage is a legitimate refusal
        Err(e) if flavor != VceFlavor::Hc0 => return if e.to_string().contains("leverage") || e.to_string().contains("degrees") { Ok(()) } else { Err(e.to_string()) },
        Err(e) => return Err(e.to_string()),
    };
    let (wus, wbc) = dense_weights(s, cfg);
    let tau: f64 = wus.iter().zip(s.y()).map(|(w, y)| w * y).sum();
    let tau_bc: f64 = wbc.iter().zip(s.y()).map(|(w, y)| w * y).sum();
    if !rel_close(tau, est.tau_us, tol) || !rel_close(tau_bc, est.tau_rbc, tol) {
        return Err(format!("tau {} vs {}, tau_bc {} vs {}", est.tau_us, tau, est.tau_rbc, tau_bc));
    }
    let mut s_us = 0.0;
    let mut s_bc = 0.0;
    for side in Side::BOTH {
        let fp = dense_fit(s, cfg.p, cfg.kernel, cfg.h, side);
        let rp = dense_residuals(s, &fp, side, flavor);
        let fq = dense_fit(s, cfg.p + 1, cfg.kernel, cfg.b, side);
        let rq = dense_residuals(s, &fq, side, flavor);
        for i in 0..s.n() {
            s_us += (wus[i] * rp[i]).powi(2);
            s_bc += (wbc[i] * rq[i]).powi(2);
        }
    }
    if !rel_close(v.se_us * v.se_us, s_us, tol) {
        return Err(format!("se_us^2 {} vs {} ({flavor:?})", v.se_us * v.se_us, s_us));
    }
    if !rel_close(v.se_rbc * v.se_rbc, s_bc, tol) {
        return Err(format!("se_rbc^2 {} vs {} ({flavor:?})", v.se_rbc * v.se_rbc, s_bc));
    }
    Ok(())
}

/// Explicit double and triple sums for the pairwise / triple terms and the ℓ¹ averages.
pub fn check_ce_oracle(s: &Sample, cfg: &FitConfig, flavor: Flavor, tol: f64) -> Result<(), String> {
    let d = CeDesign::new(s, cfg, flavor, &VceSpec::hc0()).map_err(|e| e.to_string())?;
    let n = s.n();
    let h = d.h;
    let l0 = d.ell0().to_vec();
    let e = d.residuals().to_vec();
    let v = d.conditional_variance().to_vec();
    let nf = n as f64;
    for side in 0..2 {
        let gi = d.g_tilde_inv(side).clone();
        let proj = |i: usize, j: usize| -> f64 {
            let r = DVector::from_vec(d.r_tilde(i));
            let a = DVector::from_vec(d.a_tilde(j));
            (r.transpose() * &gi * a)[(0, 0)]
        };
        let on = |i: usize| d.side_index(i) == side;
        let mut pair = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j && on(i) && on(j) {
                    pair += l0[i] * l0[i] * proj(i, j).powi(2) * e[j] * e[j];
                }
            }
        }
        pair /= nf * (nf - 1.0) * h * h;
        let got = d.term_pair(side);
        if !rel_close(got, pair, tol) {
            return Err(format!("pair term side {side}: {got} vs {pair}"));
        }
        let mut triple = 0.0;
        let p: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if on(i) && on(j) { proj(i, j) } else { 0.0 }).collect()).collect();
        for j in 0..n {
            if !on(j) || l0[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                if i == j || !on(i) {
                    continue;
                }
                let a = p[j][i] * l0[i] * e[i] * e[i];
                if a == 0.0 {
                    continue;
                }
                for k in 0..n {
                    if k == i || k == j || !on(k) {
                        continue;
                    }
                    triple += l0[j] * l0[j] * a * p[j][k] * l0[k] * e[k] * e[k];
                }
            }
        }
        triple /= nf * (nf - 1.0) * (nf - 2.0) * h.powi(3);
        let got = d.term_triple(side);
        if !rel_close(got, triple, tol) {
            return Err(format!("triple term side {side}: {got} vs {triple}"));
        }
    }
    let mean_lv: f64 = (0..n).map(|i| l0[i] * l0[i] * v[i]).sum::<f64>() / nf;
    let mut t14 = 0.0;
    let mut t15 = 0.0;
    for i in 0..n {
        if l0[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            if i == j {
                continue;
            }
            let l1 = d.ell1(i, j);
            t14 += l1 * l0[i] * l0[j] * l0[j] * e[j] * e[j] * v[i];
            t15 += l1 * l0[i] * (l0[j] * l0[j] * v[j] - mean_lv) * e[i] * e[i];
        }
    }
    let norm = nf * (nf - 1.0) * h * h;
    let (t14, t15) = (t14 / norm, t15 / norm);
    let (g14, g15) = (d.term_ell1_pair_variance(), d.term_ell1_pair_centered());
    if !rel_close(g14, t14, tol) {
        return Err(format!("ell1 pair variance: {g14} vs {t14}"));
    }
    if !rel_close(g15, t15, tol) {
        return Err(format!("ell1 pair centered: {g15} vs {t15}"));
    }
    Ok(())
}

/// Outcomes exactly polynomial of degree `deg` on each side (distinct coefficients).
pub fn polynomial_outcome(s: &Sample, left: &[f64], right: &[f64]) -> Vec<f64> {
    s.x()
        .iter()
        .map(|&x| {
            let d = x - s.c();
            let a = if x >= s.c() { right } else { left };
            a.iter().rev().fold(0.0, |acc, &c| acc * d + c)
        })
        .collect()
}

/// τ̂_US reproduces jumps for degree-p data; τ̂_BC for degree-(p+1) data.
pub fn check_polynomial_reproduction<R: Rng>(r: &mut R, s: &Sample, cfg: &FitConfig) -> Result<(), String> {
    let (nu, p) = (cfg.nu, cfg.p);
    for (deg, bc) in [(p, false), (p + 1, true)] {
        let left: Vec<f64> = (0..=deg).map(|_| r.random_range(-2.0..2.0)).collect();
        let right: Vec<f64> = (0..=deg).map(|_| r.random_range(-2.0..2.0)).collect();
        let y = polynomial_outcome(s, &left, &right);
        let s2 = s.with_outcome(y).unwrap();
        let est = point_estimate(&s2, cfg).map_err(|e| e.to_string())?;
        let truth = factorial(nu) * (right[nu] - left[nu]);
        let got = if bc { est.tau_rbc } else { est.tau_us };
        if (got - truth).abs() > 1e-7 * (1.0 + truth.abs()) * cfg.h.min(cfg.b).powi(-(nu as i32) - 1) {
            return Err(format!("degree {deg} (bc = {bc}): {got} vs {truth}"));
        }
    }
    Ok(())
}

/// Y ↦ aY + b and joint translation of (X, c): estimates and intervals transform accordingly.
pub fn check_equivariance<R: Rng>(r: &mut R, s: &Sample, cfg: &FitConfig) -> Result<(), String> {
    let vce = VceSpec::hc0();
    let base = infer(s, cfg, &vce, 0.05).map_err(|e| e.to_string())?;
    let a = r.random_range(0.2..3.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let shift = r.random_range(-5.0..5.0);
    let y: Vec<f64> = s.y().iter().map(|v| a * v + shift).collect();
    let t = infer(&s.with_outcome(y).unwrap(), cfg, &vce, 0.05).map_err(|e| e.to_string())?;
    let scale = base.us.point.abs() + base.us.se + base.rbc.point.abs() + base.rbc.se + 1.0;
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-8 * scale * a.abs().max(1.0);
    if !close(t.us.point, a * base.us.point) || !close(t.rbc.point, a * base.rbc.point) {
        return Err(format!("point estimates not equivariant (a = {a})"));
    }
    if !close(t.us.se, a.abs() * base.us.se) || !close(t.rbc.se, a.abs() * base.rbc.se) {
        return Err("standard errors not scale equivariant".into());
    }
    let (lo, hi) = if a > 0.0 { (a * base.rbc.lower, a * base.rbc.upper) } else { (a * base.rbc.upper, a * base.rbc.lower) };
    if !close(t.rbc.lower, lo) || !close(t.rbc.upper, hi) {
        return Err("interval endpoints not equivariant".into());
    }
    let dx = r.random_range(-10.0..10.0);
    let x: Vec<f64> = s.x().iter().map(|v| v + dx).collect();
    let moved = Sample::new(x, s.y().to_vec(), s.c() + dx).unwrap();
    // translation can move a point across the cutoff through rounding; skip those draws
    let same_sides = (0..s.n()).all(|i| s.side_of(i) == moved.side_of(i));
    if same_sides {
        if let Ok(m) = infer(&moved, cfg, &vce, 0.05) {
            if !rel_close(m.us.point, base.us.point, 1e-6) || !rel_close(m.rbc.se, base.rbc.se, 1e-6) {
                return Err(format!("translation changed estimates: {} vs {}", m.us.point, base.us.point));
            }
        }
    }
    Ok(())
}

/// Symmetry, self-containment, duality with the t-statistic and nesting in α.
pub fn check_interval_invariants<R: Rng>(r: &mut R, s: &Sample, cfg: &FitConfig) -> Result<(), String> {
    let vce = VceSpec::hc0();
    let a1 = r.random_range(0.01..0.5);
    let a2 = a1 * r.random_range(0.1..0.9);
    let i1 = infer(s, cfg, &vce, a1).map_err(|e| e.to_string())?;
    let i2 = infer(s, cfg, &vce, a2).map_err(|e| e.to_string())?;
    for (ci, wide) in [(i1.us, i2.us), (i1.rbc, i2.rbc)] {
        let sym = (ci.upper - ci.point) - (ci.point - ci.lower);
        if sym.abs() > 1e-12 * (1.0 + ci.point.abs() + ci.se) {
            return Err("interval not symmetric".into());
        }
        if !(ci.lower <= ci.point && ci.point <= ci.upper) {
            return Err("point outside its own interval".into());
        }
        if !rel_close(ci.length(), 2.0 * z_critical(a1) * ci.se, 1e-12) {
            return Err("length is not 2 z se".into());
        }
        if !(wide.lower <= ci.lower && ci.upper <= wide.upper) {
            return Err("intervals do not nest as alpha decreases".into());
        }
        for _ in 0..5 {
            let tau0 = ci.point + r.random_range(-3.0..3.0) * ci.se * z_critical(a1);
            let t = (ci.point - tau0) / ci.se;
            let inside = ci.lower < tau0 && tau0 < ci.upper;
            let dual = t.abs() < z_critical(a1);
            if inside != dual && (t.abs() - z_critical(a1)).abs() > 1e-9 {
                return Err("coverage duality violated".into());
            }
        }
    }
    let (tu, _) = i1.t_statistics(i1.estimate.tau_us).map_err(|e| e.to_string())?;
    let (_, tb) = i1.t_statistics(i1.estimate.tau_rbc).map_err(|e| e.to_string())?;
    if tu.abs() > 1e-12 || tb.abs() > 1e-12 {
        return Err("t-statistic at its own estimate is not zero".into());
    }
    let tau0 = i1.estimate.tau_us + r.random_range(-1.0..1.0);
    let (t, t_rbc) = i1.t_statistics(tau0).map_err(|e| e.to_string())?;
    let rebuilt = (t * i1.variance.se_us + i1.estimate.tau_rbc - i1.estimate.tau_us) / i1.variance.se_rbc;
    if !rel_close(t_rbc, rebuilt, 1e-10) {
        return Err(format!("T_RBC identity: {t_rbc} vs {rebuilt}"));
    }
    Ok(())
}

/// HC0 ≤ HC1 and HC0 ≤ HC2 ≤ HC3 for both variances; permuting observations changes nothing.
pub fn check_variance_invariants<R: Rng>(r: &mut R, s: &Sample, cfg: &FitConfig) -> Result<(), String> {
    let est = point_estimate(s, cfg).map_err(|e| e.to_string())?;
    let v = |f: VceFlavor| variance(s, &est, &VceSpec::new(f, 3).unwrap()).ok();
    let (v0, v1, v2, v3) = (v(VceFlavor::Hc0), v(VceFlavor::Hc1), v(VceFlavor::Hc2), v(VceFlavor::Hc3));
    let v0 = v0.ok_or("HC0 variance failed")?;
    let le = |a: f64, b: f64| a <= b * (1.0 + 1e-12) + 1e-300;
    if let Some(v1) = v1 {
        if !le(v0.v_us, v1.v_us) || !le(v0.v_rbc, v1.v_rbc) {
            return Err("HC0 exceeds HC1".into());
        }
    }
    if let (Some(v2), Some(v3)) = (v2, v3) {
        if !le(v0.v_us, v2.v_us) || !le(v2.v_us, v3.v_us) || !le(v0.v_rbc, v2.v_rbc) || !le(v2.v_rbc, v3.v_rbc) {
            return Err(format!("HC ordering violated: {} {} {}", v0.v_rbc, v2.v_rbc, v3.v_rbc));
        }
    }
    let mut perm: Vec<usize> = (0..s.n()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let x: Vec<f64> = perm.iter().map(|&i| s.x()[i]).collect();
    let y: Vec<f64> = perm.iter().map(|&i| s.y()[i]).collect();
    let ps = Sample::new(x, y, s.c()).unwrap();
    let pe = point_estimate(&ps, cfg).map_err(|e| e.to_string())?;
    let pv = variance(&ps, &pe, &VceSpec::hc0()).map_err(|e| e.to_string())?;
    if !rel_close(pe.tau_us, est.tau_us, 1e-9) || !rel_close(pe.tau_rbc, est.tau_rbc, 1e-9) {
        return Err("estimates depend on row order".into());
    }
    if !rel_close(pv.v_us, v0.v_us, 1e-9) || !rel_close(pv.v_rbc, v0.v_rbc, 1e-9) {
        return Err("variances depend on row order".into());
    }
    Ok(())
}
