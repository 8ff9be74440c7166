//! `sparse-meanrev`: estimate, solve, backtest and sweep from one config file.
//!
//! Precedence: built-in defaults, then `--config`, then flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparse_meanrev::commands::{cmd_backtest, cmd_estimate, cmd_solve, cmd_sweep};
use sparse_meanrev::config::{PhiMode, RunConfig};
use sparse_meanrev::estimation::SeriesKind;
use sparse_meanrev::par::{with_workers, Execution, WORKERS_ENV};
use sparse_meanrev::{selftest, Error, ProxyKind};

const EXIT_NONCONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "sparse-meanrev", version, about = "Sparse, volatile mean-reverting portfolios")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Estimate the autocovariance bundle from a price file.
    Estimate(RunArgs),
    /// Solve for a portfolio and write its report and traces.
    Solve(RunArgs),
    /// Trade a portfolio report on a price file.
    Backtest(RunArgs),
    /// Solve and backtest over the grid in `[sweep]`.
    Sweep(RunArgs),
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    prices: Option<PathBuf>,
    #[arg(long)]
    autocov: Option<PathBuf>,
    #[arg(long)]
    portfolio: Option<PathBuf>,
    #[arg(short, long = "out")]
    output_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_series)]
    series: Option<SeriesKind>,
    #[arg(long, value_parser = parse_proxy)]
    proxy: Option<ProxyKind>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_phi_mode)]
    phi_mode: Option<PhiMode>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    starts: Option<usize>,
    /// Worker threads for sweeps.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    /// Run sweep cells one after another.
    #[arg(long)]
    sequential: bool,
}

fn parse_proxy(s: &str) -> Result<ProxyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_series(s: &str) -> Result<SeriesKind, String> {
    match s {
        "log_prices" => Ok(SeriesKind::LogPrices),
        "log_returns" => Ok(SeriesKind::LogReturns),
        "prices" => Ok(SeriesKind::Prices),
        _ => Err(format!("unknown series '{s}' (log_prices, log_returns, prices)")),
    }
}

fn parse_phi_mode(s: &str) -> Result<PhiMode, String> {
    match s {
        "absolute" => Ok(PhiMode::Absolute),
        "median_variance_fraction" => Ok(PhiMode::MedianVarianceFraction),
        _ => Err(format!("unknown phi mode '{s}' (absolute, median_variance_fraction)")),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = &self.$flag { $field = v.clone().into(); })*
            };
        }
        set! {
            prices => cfg.prices,
            autocov => cfg.autocov,
            portfolio => cfg.portfolio,
            output_dir => cfg.output_dir,
            series => cfg.series,
            proxy => cfg.proxy,
            q => cfg.q,
            gamma => cfg.gamma,
            phi_mode => cfg.phi_mode,
            phi => cfg.phi_value,
            k => cfg.k,
            seed => cfg.seed,
            starts => cfg.solver.starts,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::available()
        }
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn run(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::Estimate(args) => {
            let cfg = args.resolve()?;
            let bundle = cmd_estimate(&cfg)?;
            println!(
                "wrote {} matrices ({} assets) to {}",
                bundle.matrices.len(),
                bundle.assets.len(),
                cfg.output_dir.display()
            );
        }
        Cmd::Solve(args) => {
            let cfg = args.resolve()?;
            let out = cmd_solve(&cfg)?;
            let s = &out.solve;
            println!(
                "{:?} after {} outer iterations: objective {:.6e}, volatility {:.6e}, stationarity {:.2e}",
                s.status, s.outer_iterations, s.objective, s.volatility, s.kkt.stationarity_residual
            );
            for (asset, w) in out.report.weights.iter().filter(|(_, w)| **w != 0.0) {
                println!("  {asset:>12} {w:+.6}");
            }
            if !s.converged() {
                return Ok(ExitCode::from(EXIT_NONCONVERGED));
            }
        }
        Cmd::Backtest(args) => {
            let cfg = args.resolve()?;
            let bt = cmd_backtest(&cfg)?;
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "cumulative P&L {:.6}, Sharpe {}, Dickey-Fuller {}, {} trades",
                bt.cumulative_pnl,
                opt(bt.sharpe),
                opt(bt.dickey_fuller),
                bt.trades
            );
            if !bt.flags.is_empty() {
                println!("flags: {}", bt.flags.join(", "));
            }
        }
        Cmd::Sweep(args) => {
            let cfg = args.resolve()?;
            let exec = args.execution();
            let rows = with_workers(args.workers, || cmd_sweep(&cfg, exec))?;
            let failed = rows.iter().filter(|r| r.status == "failed").count();
            println!(
                "{} cells ({failed} failed); summary in {}",
                rows.len(),
                cfg.output_dir.join("sweep.csv").display()
            );
        }
        Cmd::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                println!("{} {:<20} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::from(EXIT_NONCONVERGED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    run(cli.command).unwrap_or_else(|e| fail(&e))
}
