//! `volcal`: static-arbitrage checks, prior fitting, calibration and smile
//! export for call option quotes.
//!
//! Exit codes: 0 success, 1 arbitrage check failed, 2 usage or input error,
//! 3 arbitrage suspected during calibration, 4 calibration did not converge.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use log::warn;
use volcal_core::surface::{load_surface_any, save_surface_json, smile_csv, CalibratedSurface};
use volcal_core::{
    calibrate_surface, check_all, compute_weights, fit_first_prior, fit_transition_prior, parse_quotes, query_smile,
    save_surface, Error, RunConfig, WeightedSlice,
};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ARBITRAGE: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "volcal", version, about = "Arbitrage-free calibration of call option quotes")]
struct Cli {
    /// Flat `key = value` config file, applied before the flags below.
    #[arg(long, global = true, env = "VOLCAL_CONFIG")]
    config: Option<PathBuf>,

    /// Penalty scale: omega = lambda * (ask - bid).
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Points of the discretized marginal handed to the next maturity.
    #[arg(long, global = true)]
    grid_n: Option<usize>,

    /// Gradient tolerance relative to the spot.
    #[arg(long, global = true)]
    grad_tol: Option<f64>,

    #[arg(long, global = true)]
    max_outer: Option<usize>,

    /// Worker threads (0: all cores, 1: sequential and bitwise reproducible).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Floor the transition kernels at zero.
    #[arg(long, global = true)]
    truncate_at_zero: bool,

    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check quotes for static arbitrage; exits 1 if any check fails.
    Check {
        quotes: PathBuf,
        /// Also write every check as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the fitted prior of every maturity as `maturity,sigma0,beta`.
    FitPrior { quotes: PathBuf },
    /// Calibrate all maturities and save the surface.
    Calibrate {
        quotes: PathBuf,
        /// Surface file to write.
        #[arg(short, long)]
        out: PathBuf,
        /// Write JSON instead of the binary format.
        #[arg(long)]
        json: bool,
        /// Directory for the per-maturity convergence traces (default: next to the surface).
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Model prices and implied volatilities of one maturity as CSV.
    Smile {
        surface: PathBuf,
        /// Maturity index (0 is the earliest).
        #[arg(short, long)]
        index: usize,
        /// Explicit strikes, comma separated; overrides the range.
        #[arg(long, value_delimiter = ',')]
        strikes: Vec<f64>,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long, default_value_t = 41)]
        points: usize,
        /// Output file (default: stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write the stored convergence traces as CSV.
    ExportTrace {
        surface: PathBuf,
        /// Only this maturity index; printed to stdout unless --out-dir is given.
        #[arg(short, long)]
        index: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::ArbitrageSuspected { .. }) => EXIT_ARBITRAGE,
            Some(Error::NotConverged { .. }) => EXIT_NOT_CONVERGED,
            _ => EXIT_USAGE,
        };
        Self { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = effective_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.render());
        return Ok(0);
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global().context("starting the thread pool")?;
    }
    match cli.command {
        None => Err(anyhow!("no command given (see --help)").into()),
        Some(Command::Check { quotes, csv }) => cmd_check(&quotes, csv.as_deref(), &cfg),
        Some(Command::FitPrior { quotes }) => cmd_fit_prior(&quotes, &cfg),
        Some(Command::Calibrate { quotes, out, json, trace_dir }) => {
            cmd_calibrate(&quotes, &out, json, trace_dir.as_deref(), &cfg)
        }
        Some(Command::Smile { surface, index, strikes, from, to, points, out }) => {
            cmd_smile(&surface, index, strikes, (from, to, points), out.as_deref())
        }
        Some(Command::ExportTrace { surface, index, out_dir }) => cmd_export_trace(&surface, index, out_dir.as_deref()),
    }
}

/// Defaults, then the config file, then command-line flags.
fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    let c = &mut cfg.calibration;
    if let Some(v) = cli.lambda {
        c.lambda = v;
    }
    if let Some(v) = cli.grid_n {
        c.grid.n = v;
    }
    if let Some(v) = cli.grad_tol {
        c.solver.grad_tol = v;
    }
    if let Some(v) = cli.max_outer {
        c.solver.max_outer = v;
    }
    if cli.truncate_at_zero {
        c.truncate_at_zero = true;
    }
    if let Some(v) = cli.threads {
        cfg.threads = v;
    }
    cfg.calibration.solver.parallel = cfg.threads != 1;
    cfg.validate()?;
    Ok(cfg)
}

fn read_slices(path: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<WeightedSlice>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading quotes {}", path.display()))?;
    let slices = parse_quotes(&text, cfg.calibration.lambda).with_context(|| format!("in {}", path.display()))?;
    if slices.is_empty() {
        bail!("{} holds no quotes", path.display());
    }
    slices
        .iter()
        .map(|s| compute_weights(s, cfg.calibration.eps_floor).map_err(Into::into))
        .collect()
}

fn read_surface(path: &Path) -> anyhow::Result<CalibratedSurface> {
    let bytes = fs::read(path).with_context(|| format!("reading surface {}", path.display()))?;
    load_surface_any(&bytes).with_context(|| format!("in {}", path.display()))
}

fn cmd_check(quotes: &Path, csv: Option<&Path>, cfg: &RunConfig) -> Outcome {
    let slices = read_slices(quotes, cfg)?;
    let report = check_all(&slices)?;
    print!("{}", report.to_text());
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(if report.overall_pass { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_fit_prior(quotes: &Path, cfg: &RunConfig) -> Outcome {
    let slices = read_slices(quotes, cfg)?;
    let mut out = String::from("maturity,sigma0,beta\n");
    let first = fit_first_prior(&slices[0])?;
    out.push_str(&format!("{},{},{}\n", slices[0].maturity(), first.sigma0, first.beta));
    if slices.len() > 1 {
        // later priors are fitted against the calibrated previous marginal
        let surface = calibrate_surface(&slices[..slices.len() - 1], &cfg.calibration)?;
        for (prev, ws) in surface.slices.iter().zip(&slices[1..]) {
            let p = fit_transition_prior(&prev.marginal, ws, ws.maturity() - prev.maturity)?;
            out.push_str(&format!("{},{},{}\n", ws.maturity(), p.sigma0, p.beta));
        }
    }
    print!("{out}");
    Ok(0)
}

fn trace_path(dir: &Path, stem: &str, index: usize) -> PathBuf {
    dir.join(format!("{stem}trace_{index}.csv"))
}

fn cmd_calibrate(quotes: &Path, out: &Path, json: bool, trace_dir: Option<&Path>, cfg: &RunConfig) -> Outcome {
    let slices = read_slices(quotes, cfg)?;
    let report = check_all(&slices)?;
    if !report.overall_pass {
        warn!("{} static arbitrage check(s) failed; calibrating anyway", report.failures());
    }
    let surface = match calibrate_surface(&slices, &cfg.calibration) {
        Ok(s) => s,
        Err(e) => {
            let trace = match &e {
                Error::ArbitrageSuspected { trace, .. } | Error::NotConverged { trace, .. } => Some(trace.to_csv()),
                _ => None,
            };
            if let (Some(csv), Some(dir)) = (trace, trace_dir) {
                let path = dir.join("failed_trace.csv");
                fs::create_dir_all(dir).and_then(|_| fs::write(&path, csv)).ok();
                eprintln!("trace of the failing maturity written to {}", path.display());
            }
            return Err(e.into());
        }
    };
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let sink = io::BufWriter::new(file);
    if json {
        save_surface_json(&surface, sink)?;
    } else {
        save_surface(&surface, sink)?;
    }
    let (dir, stem) = match trace_dir {
        Some(d) => (d.to_path_buf(), String::new()),
        None => {
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let stem = out.file_stem().map(|s| format!("{}.", s.to_string_lossy())).unwrap_or_default();
            (dir, stem)
        }
    };
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    for (i, sl) in surface.slices.iter().enumerate() {
        let path = trace_path(&dir, &stem, i);
        fs::write(&path, sl.trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    for sl in &surface.slices {
        println!(
            "maturity {}: {} iterations, |grad| {:.3e}, rate {:.4}",
            sl.maturity, sl.summary.iterations, sl.summary.grad_inf, sl.summary.lambda_hat
        );
    }
    println!("surface written to {}", out.display());
    Ok(0)
}

fn cmd_smile(
    surface: &Path,
    index: usize,
    strikes: Vec<f64>,
    (from, to, points): (Option<f64>, Option<f64>, usize),
    out: Option<&Path>,
) -> Outcome {
    let surface = read_surface(surface)?;
    let Some(slice) = surface.slices.get(index) else {
        return Err(anyhow!("maturity index {index} out of range ({} maturities)", surface.slices.len()).into());
    };
    let strikes = if strikes.is_empty() {
        let quoted = slice.strikes();
        let lo = from.unwrap_or_else(|| 0.8 * quoted.first().copied().unwrap_or(surface.spot));
        let hi = to.unwrap_or_else(|| 1.2 * quoted.last().copied().unwrap_or(surface.spot));
        if points < 2 || !(hi > lo) {
            return Err(anyhow!("need --from < --to and at least 2 points").into());
        }
        (0..points).map(|j| lo + (hi - lo) * j as f64 / (points - 1) as f64).collect()
    } else {
        strikes
    };
    let csv = smile_csv(slice.maturity, &query_smile(&surface, index, &strikes)?);
    match out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().write_all(csv.as_bytes()).context("writing to stdout")?,
    }
    Ok(0)
}

fn cmd_export_trace(surface: &Path, index: Option<usize>, out_dir: Option<&Path>) -> Outcome {
    let surface = read_surface(surface)?;
    let n = surface.slices.len();
    let indices: Vec<usize> = match index {
        Some(i) if i >= n => return Err(anyhow!("maturity index {i} out of range ({n} maturities)").into()),
        Some(i) => vec![i],
        None => (0..n).collect(),
    };
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for i in indices {
                let path = trace_path(dir, "", i);
                fs::write(&path, surface.slices[i].trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        None if indices.len() == 1 => {
            io::stdout().write_all(surface.slices[indices[0]].trace.to_csv().as_bytes()).context("writing to stdout")?;
        }
        None => return Err(anyhow!("give --index or --out-dir").into()),
    }
    Ok(0)
}
