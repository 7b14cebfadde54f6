//! Monte Carlo harness: polynomial RD design with Beta-distributed scores,
//! replication loop, coverage and length aggregation.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidths::{select, Method, RhoMode, SelectorOptions};
use crate::error::{RdError, Result};
use crate::inference::{infer, IntervalMethod};
use crate::kernels::{optimal_rho, Kernel};
use crate::lpfit::{FitConfig, Sample};
use crate::numeric::factorial;
use crate::variance::VceSpec;

pub const DEFAULT_LEFT: [f64; 6] = [3.71, 2.30, 3.28, 1.45, 0.23, 0.03];
pub const DEFAULT_RIGHT: [f64; 6] = [0.26, 18.49, -54.81, 74.30, -45.02, 9.83];
pub const DEFAULT_SIGMA: f64 = 0.6136;

/// How the main bandwidth is chosen in each replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    Selector(Method),
    Fixed(f64),
}

impl fmt::Display for BandwidthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BandwidthRule::Selector(m) => write!(f, "{m}"),
            BandwidthRule::Fixed(h) => write!(f, "fixed({h})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMethod {
    pub bandwidth: BandwidthRule,
    pub rho_mode: RhoMode,
    pub interval: IntervalMethod,
}

impl McMethod {
    pub fn tag(&self) -> String {
        let iv = match self.interval {
            IntervalMethod::Us => "us",
            IntervalMethod::Rbc => "rbc",
        };
        format!("{}/{}/{}", self.bandwidth, iv, self.rho_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub sigma_eps: f64,
    pub beta_params: (f64, f64),
    pub cutoff: f64,
    pub left_coeffs: [f64; 6],
    pub right_coeffs: [f64; 6],
    pub methods: Vec<McMethod>,
    pub nu: usize,
    pub p: usize,
    pub kernel: Kernel,
    pub vce: VceSpec,
    pub alpha: f64,
    /// Cap on worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

pub const TABLE_SELECTORS: [Method; 4] = [Method::MseRd, Method::CeDpi, Method::CeRot, Method::TradeOff];

impl McConfig {
    /// Design with the default polynomial, noise and Beta(2,4) scores and no methods.
    pub fn new(n: usize, reps: usize, seed: u64) -> Self {
        McConfig {
            n,
            reps,
            seed,
            sigma_eps: DEFAULT_SIGMA,
            beta_params: (2.0, 4.0),
            cutoff: 0.0,
            left_coeffs: DEFAULT_LEFT,
            right_coeffs: DEFAULT_RIGHT,
            methods: Vec::new(),
            nu: 0,
            p: 1,
            kernel: Kernel::Triangular,
            vce: VceSpec::default(),
            alpha: 0.05,
            threads: None,
        }
    }

    /// Selector rows crossed with the US, RBC(ρ=1), RBC(ρ*) and RBC(ρ̂) columns.
    pub fn table(n: usize, reps: usize, seed: u64) -> Self {
        let mut cfg = McConfig::new(n, reps, seed);
        for m in TABLE_SELECTORS {
            let bw = BandwidthRule::Selector(m);
            cfg.methods.push(McMethod { bandwidth: bw, rho_mode: RhoMode::One, interval: IntervalMethod::Us });
            for rho_mode in [RhoMode::One, RhoMode::Star, RhoMode::Estimated] {
                cfg.methods.push(McMethod { bandwidth: bw, rho_mode, interval: IntervalMethod::Rbc });
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(RdError::invalid("reps must be at least 1"));
        }
        if self.n < 50 {
            return Err(RdError::invalid(format!("n must be at least 50, got {}", self.n)));
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(RdError::invalid("sigma_eps must be positive"));
        }
        if !(self.beta_params.0 > 0.0 && self.beta_params.1 > 0.0) {
            return Err(RdError::invalid("Beta parameters must be positive"));
        }
        if self.methods.is_empty() {
            return Err(RdError::invalid("no methods requested"));
        }
        if self.threads == Some(0) {
            return Err(RdError::invalid("thread cap must be at least 1"));
        }
        Ok(())
    }

    pub fn regression(&self, x: f64) -> f64 {
        let a = if x < self.cutoff { &self.left_coeffs } else { &self.right_coeffs };
        a.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    /// ν-th derivative jump of the regression function at the cutoff.
    pub fn true_tau(&self) -> f64 {
        let deriv = |a: &[f64; 6]| -> f64 {
            (self.nu..6)
                .map(|k| a[k] * factorial(k) / factorial(k - self.nu) * self.cutoff.powi((k - self.nu) as i32))
                .sum()
        };
        deriv(&self.right_coeffs) - deriv(&self.left_coeffs)
    }

    fn selector_options(&self) -> SelectorOptions {
        let mut opts = SelectorOptions::new(self.nu, self.p, self.kernel);
        opts.vce = self.vce;
        opts.alpha = self.alpha;
        opts
    }
}

/// X = 2·Beta(a, b) − 1, Y = m(X) + N(0, σ²).
pub fn dgp_draw<R: Rng + ?Sized>(config: &McConfig, rng: &mut R) -> Result<Sample> {
    let beta = Beta::new(config.beta_params.0, config.beta_params.1)
        .map_err(|e| RdError::invalid(format!("Beta parameters: {e}")))?;
    let noise = Normal::new(0.0, config.sigma_eps).map_err(|e| RdError::invalid(format!("noise scale: {e}")))?;
    let mut x = Vec::with_capacity(config.n);
    let mut y = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let xi = 2.0 * beta.sample(rng) - 1.0;
        x.push(xi);
        y.push(config.regression(xi) + noise.sample(rng));
    }
    Sample::new(x, y, config.cutoff)
}

pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Draw {
    h: f64,
    b: f64,
    covered: bool,
    length: f64,
}

fn run_replication(config: &McConfig, rep: u64, rho_star: Option<f64>, tau: f64) -> Result<Vec<Draw>> {
    let mut rng = replication_rng(config.seed, rep);
    let sample = dgp_draw(config, &mut rng)?;
    let opts = config.selector_options();
    // (h, b̂_MSE) per distinct bandwidth rule
    let mut chosen: HashMap<String, (f64, f64)> = HashMap::new();
    let mut out = Vec::with_capacity(config.methods.len());
    for m in &config.methods {
        let key = m.bandwidth.to_string();
        if !chosen.contains_key(&key) {
            let hb = match m.bandwidth {
                BandwidthRule::Selector(method) => {
                    let sel = select(&sample, method, &opts)?;
                    (sel.h, sel.diagnostic("b_mse").unwrap_or(f64::NAN))
                }
                BandwidthRule::Fixed(h) => (h, f64::NAN),
            };
            chosen.insert(key.clone(), hb);
        }
        let (h, b_mse) = chosen[&key];
        let b = match (m.interval, m.rho_mode) {
            (IntervalMethod::Us, _) | (_, RhoMode::One) => h,
            (_, RhoMode::Star) => h / rho_star.ok_or_else(|| RdError::invalid("rho* needs nu = 0"))?,
            (_, RhoMode::Estimated) => {
                if b_mse.is_nan() {
                    crate::bandwidths::mse_pilot(&sample, &opts)?.b
                } else {
                    b_mse
                }
            }
        };
        let cfg = FitConfig::new(config.nu, config.p, config.kernel, h, b)?;
        let inf = infer(&sample, &cfg, &config.vce, config.alpha)?;
        let ci = match m.interval {
            IntervalMethod::Us => inf.us,
            IntervalMethod::Rbc => inf.rbc,
        };
        out.push(Draw { h, b, covered: ci.contains(tau), length: ci.length() });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub tag: String,
    pub method: McMethod,
    pub mean_h: f64,
    pub mean_rho: f64,
    pub coverage: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub records: Vec<McRecord>,
    pub reps: usize,
    pub rep_failures: usize,
    /// Replication indices that failed; replay with `replication_rng(seed, index)`.
    pub failed_reps: Vec<u64>,
    pub seed: u64,
    pub true_tau: f64,
}

/// One row per bandwidth selector, in the coverage/length table layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub selector: String,
    pub bandwidth: f64,
    pub rho: f64,
    pub coverage_us: f64,
    pub coverage_rbc_rho1: f64,
    pub coverage_rbc_rhostar: f64,
    pub coverage_rbc_rhohat: f64,
    pub length_us: f64,
    pub length_rbc_rho1: f64,
    pub length_rbc_rhostar: f64,
    pub length_rbc_rhohat: f64,
}

impl McSummary {
    pub fn find(&self, bandwidth: BandwidthRule, rho_mode: RhoMode, interval: IntervalMethod) -> Option<&McRecord> {
        let want = McMethod { bandwidth, rho_mode, interval };
        self.records.iter().find(|r| r.method == want)
    }

    pub fn failure_rate(&self) -> f64 {
        self.rep_failures as f64 / self.reps as f64
    }

    /// Rows for every selector that has all four columns.
    pub fn table(&self) -> Vec<TableRow> {
        let mut rows = Vec::new();
        let mut seen: Vec<BandwidthRule> = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.method.bandwidth) {
                seen.push(r.method.bandwidth);
            }
        }
        for bw in seen {
            let us = self.find(bw, RhoMode::One, IntervalMethod::Us);
            let r1 = self.find(bw, RhoMode::One, IntervalMethod::Rbc);
            let rs = self.find(bw, RhoMode::Star, IntervalMethod::Rbc);
            let rh = self.find(bw, RhoMode::Estimated, IntervalMethod::Rbc);
            if let (Some(us), Some(r1), Some(rs), Some(rh)) = (us, r1, rs, rh) {
                rows.push(TableRow {
                    selector: bw.to_string(),
                    bandwidth: us.mean_h,
                    rho: rh.mean_rho,
                    coverage_us: us.coverage,
                    coverage_rbc_rho1: r1.coverage,
                    coverage_rbc_rhostar: rs.coverage,
                    coverage_rbc_rhohat: rh.coverage,
                    length_us: us.mean_length,
                    length_rbc_rho1: r1.mean_length,
                    length_rbc_rhostar: rs.mean_length,
                    length_rbc_rhohat: rh.mean_length,
                });
            }
        }
        rows
    }
}

pub fn run_mc(config: &McConfig) -> Result<McSummary> {
    config.validate()?;
    let rho_star = if config.nu == 0 && config.p <= 3 { Some(optimal_rho(config.p, config.kernel)?) } else { None };
    let tau = config.true_tau();
    let work = || -> Vec<Result<Vec<Draw>>> {
        (0..config.reps as u64)
            .into_par_iter()
            .map(|rep| run_replication(config, rep, rho_star, tau))
            .collect()
    };
    let results = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| RdError::invalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let k = config.methods.len();
    let mut sum_h = vec![0.0; k];
    let mut sum_rho = vec![0.0; k];
    let mut hits = vec![0usize; k];
    let mut sum_len = vec![0.0; k];
    let mut failed = Vec::new();
    let mut last_err = None;
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(draws) => {
                for (j, d) in draws.iter().enumerate() {
                    sum_h[j] += d.h;
                    sum_rho[j] += d.h / d.b;
                    hits[j] += d.covered as usize;
                    sum_len[j] += d.length;
                }
            }
            Err(e) => {
                failed.push(rep as u64);
                last_err = Some(e);
            }
        }
    }
    let ok = config.reps - failed.len();
    if failed.len() as f64 > 0.01 * config.reps as f64 {
        return Err(RdError::numerical(format!(
            "{} of {} replications failed (limit 1%); last error: {}",
            failed.len(),
            config.reps,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let denom = ok as f64;
    let records = config
        .methods
        .iter()
        .enumerate()
        .map(|(j, m)| McRecord {
            tag: m.tag(),
            method: *m,
            mean_h: sum_h[j] / denom,
            mean_rho: sum_rho[j] / denom,
            coverage: hits[j] as f64 / denom,
            mean_length: sum_len[j] / denom,
        })
        .collect();
    Ok(McSummary {
        records,
        reps: config.reps,
        rep_failures: failed.len(),
        failed_reps: failed,
        seed: config.seed,
        true_tau: tau,
    })
}
