use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rdce::bandwidths::select;
use rdce::io::{estimate_sample, parse_csv, write_table_csv, BandwidthChoice, EstimateRequest, OutputFormat};
use rdce::kernels::optimal_rho;
use rdce::simulate::{run_mc, McConfig};
use rdce::{Kernel, Method, RdError, RhoMode, VceFlavor, VceSpec};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rdce", version, about = "Sharp regression discontinuity estimation with robust bias-corrected inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Point estimates, standard errors and confidence intervals.
    Estimate(EstimateArgs),
    /// Bandwidth selection only.
    Bandwidth(BandwidthArgs),
    /// Monte Carlo coverage and length table.
    Simulate(SimulateArgs),
    /// Optimal h/b ratio for the bias-corrected equivalent kernel.
    RhoStar(RhoStarArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Uniform,
    Triangular,
    Epanechnikov,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Kernel {
        match k {
            KernelArg::Uniform => Kernel::Uniform,
            KernelArg::Triangular => Kernel::Triangular,
            KernelArg::Epanechnikov => Kernel::Epanechnikov,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mserd,
    Cerdpi,
    Cerot,
    Tradeoff,
    Usce,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Mserd => Method::MseRd,
            MethodArg::Cerdpi => Method::CeDpi,
            MethodArg::Cerot => Method::CeRot,
            MethodArg::Tradeoff => Method::TradeOff,
            MethodArg::Usce => Method::UsCe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RhoArg {
    One,
    Star,
    Estimated,
}

impl From<RhoArg> for RhoMode {
    fn from(r: RhoArg) -> RhoMode {
        match r {
            RhoArg::One => RhoMode::One,
            RhoArg::Star => RhoMode::Star,
            RhoArg::Estimated => RhoMode::Estimated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VceArg {
    Hc0,
    Hc1,
    Hc2,
    Hc3,
    Nn,
}

impl From<VceArg> for VceFlavor {
    fn from(v: VceArg) -> VceFlavor {
        match v {
            VceArg::Hc0 => VceFlavor::Hc0,
            VceArg::Hc1 => VceFlavor::Hc1,
            VceArg::Hc2 => VceFlavor::Hc2,
            VceArg::Hc3 => VceFlavor::Hc3,
            VceArg::Nn => VceFlavor::Nn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Running variable column.
    #[arg(long)]
    score: String,
    /// Outcome column.
    #[arg(long)]
    outcome: String,
    #[arg(long, allow_hyphen_values = true)]
    cutoff: f64,
    #[arg(long, default_value_t = 0)]
    nu: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, value_enum, default_value = "triangular")]
    kernel: KernelArg,
    #[arg(long, value_enum, default_value = "hc3")]
    vce: VceArg,
    /// Neighbors for the nearest-neighbor variance estimator.
    #[arg(long = "nn-j", default_value_t = 3)]
    nn_j: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "one")]
    rho: RhoArg,
}

impl DataArgs {
    fn request(&self, bandwidth: BandwidthChoice) -> Result<EstimateRequest, RdError> {
        let mut req = EstimateRequest::new(&self.input, &self.score, &self.outcome, self.cutoff);
        req.nu = self.nu;
        req.p = self.p;
        req.kernel = self.kernel.into();
        req.vce = VceSpec::new(self.vce.into(), self.nn_j)?;
        req.alpha = self.alpha;
        req.rho_mode = self.rho.into();
        req.bandwidth = bandwidth;
        Ok(req)
    }
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, conflicts_with = "h")]
    method: Option<MethodArg>,
    /// Fixed main bandwidth.
    #[arg(long)]
    h: Option<f64>,
    /// Fixed bias bandwidth (requires --h).
    #[arg(long, requires = "h")]
    b: Option<f64>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

#[derive(Args)]
struct BandwidthArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "mserd")]
    method: MethodArg,
    /// Include coverage-error constants and their term breakdown.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 5000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.csv` writes the table as CSV, anything else JSON. Defaults to stdout JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hc3")]
    vce: VceArg,
    /// Worker thread cap.
    #[arg(long, env = "RDCE_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct RhoStarArgs {
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, value_enum, default_value = "triangular")]
    kernel: KernelArg,
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn estimate(args: &EstimateArgs) -> Result<(), RdError> {
    let choice = match (args.h, args.method) {
        (Some(h), _) => BandwidthChoice::Fixed { h, b: args.b },
        (None, Some(m)) => BandwidthChoice::Method(m.into()),
        (None, None) => BandwidthChoice::Method(Method::MseRd),
    };
    let mut req = args.data.request(choice)?;
    req.format = match args.format {
        FormatArg::Json => OutputFormat::Json,
        FormatArg::Csv => OutputFormat::Csv,
    };
    let data = parse_csv(&req.input, &req.score_col, &req.outcome_col, req.cutoff)?;
    let report = estimate_sample(&req, &data.sample, data.dropped)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match req.format {
        OutputFormat::Json => println!("{}", report.to_json()?),
        OutputFormat::Csv => print!("{}", report.to_csv()?),
    }
    Ok(())
}

fn bandwidth(args: &BandwidthArgs) -> Result<(), RdError> {
    let req = args.data.request(BandwidthChoice::Method(args.method.into()))?;
    let data = parse_csv(&req.input, &req.score_col, &req.outcome_col, req.cutoff)?;
    let sel = select(&data.sample, args.method.into(), &req.selector_options())?;
    let mut warnings = sel.warnings.clone();
    if data.dropped > 0 {
        warnings.insert(0, format!("cli_io: dropped {} row(s) with missing or non-finite values", data.dropped));
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let diagnostics: serde_json::Map<String, serde_json::Value> =
        sel.diagnostics.iter().filter(|(_, v)| v.is_finite()).map(|(k, v)| (k.clone(), json!(v))).collect();
    let mut out = json!({
        "h": sel.h,
        "b": sel.b,
        "rho": sel.rho(),
        "method": sel.method.to_string(),
        "rho_mode": sel.rho_mode.to_string(),
        "diagnostics": diagnostics,
        "warnings": warnings,
    });
    if sel.objective_value.is_finite() {
        out["objective_value"] = json!(sel.objective_value);
    }
    if args.verbose {
        if let Some(c) = &sel.constants {
            let terms: serde_json::Map<String, serde_json::Value> = rdce::cecoef::Q1_TERM_NAMES
                .iter()
                .zip(&c.q1_terms)
                .map(|(k, v)| (k.to_string(), json!(v)))
                .collect();
            out["constants"] = json!({
                "q1": c.q1, "q2": c.q2, "q3": c.q3,
                "sigma_tilde_sq": c.sigma_tilde_sq,
                "bias_tilde": c.bias_tilde,
                "pilot_h": c.pilot_h,
                "rho": c.rho,
                "q1_terms": terms,
            });
        }
    }
    print_json(&out);
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), RdError> {
    let mut cfg = McConfig::table(args.n, args.reps, args.seed);
    cfg.vce = VceSpec::new(args.vce.into(), 3)?;
    cfg.threads = args.threads;
    let summary = run_mc(&cfg)?;
    if summary.rep_failures > 0 {
        eprintln!(
            "warning: simulate: {} replication(s) failed and were excluded (indices {:?})",
            summary.rep_failures, summary.failed_reps
        );
    }
    let rows = summary.table();
    let doc = json!({
        "n": args.n,
        "reps": args.reps,
        "seed": args.seed,
        "true_tau": summary.true_tau,
        "rep_failures": summary.rep_failures,
        "rows": rows,
    });
    match &args.out {
        Some(path) if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => {
            write_table_csv(&rows, std::fs::File::create(path)?)?;
        }
        Some(path) => {
            std::fs::write(path, serde_json::to_string_pretty(&doc).expect("json values serialize"))?;
        }
        None => print_json(&doc),
    }
    Ok(())
}

fn rho_star(args: &RhoStarArgs) -> Result<(), RdError> {
    let kernel: Kernel = args.kernel.into();
    let rho = optimal_rho(args.p, kernel)?;
    print_json(&json!({ "p": args.p, "kernel": kernel.to_string(), "rho_star": rho }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Bandwidth(a) => bandwidth(a),
        Command::Simulate(a) => simulate(a),
        Command::RhoStar(a) => rho_star(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
