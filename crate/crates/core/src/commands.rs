//! The estimate → solve → backtest → sweep pipeline behind the CLI.
//!
//! Each command writes into `output_dir`: the resolved `config.toml`, JSON
//! reports and stamped CSVs. Re-running from that `config.toml` reproduces the
//! outputs byte for byte.

use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DVector;

use crate::backtest::{cumulative_pnl, dickey_fuller, sharpe, simulate, spread, TradeLog};
use crate::config::{PhiMode, RunConfig};
use crate::error::{Error, Result};
use crate::estimation::{build_autocov_set_default, default_a0_floor, autocov, PriceMatrix, SeriesMatrix};
use crate::io::{
    inner_rows, read_json, read_prices_csv, sha256_file, step_rows, write_csv, write_json, write_text,
    AutocovBundle, BacktestReport, OuterRow, PortfolioReport, Provenance, SeriesPoint, SolveDetails,
    Stamp, SweepRow, BACKTEST_SCHEMA,
};
use crate::model::{build_instance, AutocovSet, ProxyKind};
use crate::par::{par_map, Execution};
use crate::ppc::{ppc_solve, SolveReport};

pub const AUTOCOV_FILE: &str = "autocov.json";
pub const PORTFOLIO_FILE: &str = "portfolio.json";
pub const BACKTEST_FILE: &str = "backtest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const METHOD: &str = "ppc";

fn stamp(cfg: &RunConfig) -> Stamp {
    Stamp {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    write_text(&cfg.output_dir.join(CONFIG_FILE), &cfg.to_toml())
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::BadParam(format!("no {what} given")))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// `φ` from the configured mode.
pub fn resolve_phi(cfg: &RunConfig, set: &AutocovSet) -> f64 {
    match cfg.phi_mode {
        PhiMode::Absolute => cfg.phi_value,
        PhiMode::MedianVarianceFraction => {
            let diag: Vec<f64> = set.a(0).diagonal().iter().copied().collect();
            cfg.phi_value * median(&diag)
        }
    }
}

fn estimation_series(cfg: &RunConfig, prices: &PriceMatrix) -> Result<(SeriesMatrix, [usize; 2])> {
    let [start, end] = cfg.estimation_rows.unwrap_or([0, prices.len()]);
    if end > prices.len() {
        return Err(Error::BadWindow {
            start,
            end,
            len: prices.len(),
        });
    }
    let rows = prices.values().rows(start, end - start).into_owned();
    let window = PriceMatrix::new(rows, prices.assets().to_vec(), None)?;
    Ok((cfg.series.apply(&window, 1)?, [start, end]))
}

/// Estimates `A_0..A_q` from the configured price file.
pub fn estimate_bundle(cfg: &RunConfig, q: usize) -> Result<AutocovBundle> {
    let path = require(&cfg.prices, "price file (`prices`)")?;
    let prices = read_prices_csv(path)?;
    let (series, rows) = estimation_series(cfg, &prices)?;
    let set = build_autocov_set_default(&series, q)?;
    let provenance = Provenance {
        source: Some(path.display().to_string()),
        source_sha256: Some(sha256_file(path)?),
        series: cfg.series,
        rows,
        symmetrized: true,
        psd_repaired: true,
        a0_floor: default_a0_floor(&autocov(&series, 0)?),
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    Ok(AutocovBundle::new(&set, prices.assets().to_vec(), provenance))
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<AutocovBundle> {
    let bundle = estimate_bundle(cfg, cfg.q)?;
    write_json(&cfg.output_dir.join(AUTOCOV_FILE), &bundle)?;
    write_config(cfg)?;
    Ok(bundle)
}

/// The autocovariance set for `cfg.q`, from the bundle when configured and
/// from the price file otherwise.
pub fn load_autocov(cfg: &RunConfig) -> Result<(AutocovSet, Vec<String>)> {
    let bundle = match &cfg.autocov {
        Some(path) => read_json::<AutocovBundle>(path)?,
        None => estimate_bundle(cfg, cfg.q)?,
    };
    let set = bundle.to_set()?;
    if set.lag_count() < cfg.q {
        return Err(Error::BadParam(format!(
            "autocov bundle has q = {}, config asks for {}",
            set.lag_count(),
            cfg.q
        )));
    }
    Ok((set.truncated(cfg.q)?, bundle.assets))
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub solve: SolveReport,
    pub report: PortfolioReport,
}

/// Solves on an already loaded set and writes the report and traces.
pub fn solve_with(cfg: &RunConfig, set: AutocovSet, assets: &[String]) -> Result<SolveOutcome> {
    let phi = resolve_phi(cfg, &set);
    let inst = build_instance(set, cfg.proxy, cfg.gamma, phi, cfg.k)?;
    let solve = ppc_solve(&inst, &cfg.solver, cfg.seed)?;
    let mut report = PortfolioReport::new(METHOD, assets, &solve.portfolio);
    report.proxy = Some(cfg.proxy);
    report.q = Some(cfg.q);
    report.gamma = Some(inst.gamma());
    report.phi = Some(phi);
    report.k = Some(cfg.k);
    report.objective = Some(solve.objective);
    report.volatility = Some(solve.volatility);
    report.config_hash = Some(cfg.hash());
    report.seed = Some(cfg.seed);
    report.solve = Some(SolveDetails::from(&solve));

    let out = &cfg.output_dir;
    let st = stamp(cfg);
    write_json(&out.join(PORTFOLIO_FILE), &report)?;
    write_csv(&out.join("trace.csv"), &st, solve.outer_trace.iter().map(OuterRow::from))?;
    write_csv(&out.join("inner_trace.csv"), &st, inner_rows(&solve))?;
    write_config(cfg)?;
    Ok(SolveOutcome { solve, report })
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveOutcome> {
    let (set, assets) = load_autocov(cfg)?;
    solve_with(cfg, set, &assets)
}

fn flat_log(s: &[f64]) -> TradeLog {
    let len = s.len();
    TradeLog {
        spread: s.to_vec(),
        z: vec![0.0; len],
        position: vec![0; len],
        pnl: vec![0.0; len],
        roi: vec![0.0; len],
        cum_pnl: vec![0.0; len],
    }
}

fn flag(err: &Error) -> String {
    match err {
        Error::ZeroVolatilitySpread => "zero_volatility_spread".into(),
        Error::ZeroVariance => "zero_variance".into(),
        Error::DegenerateRegression => "degenerate_regression".into(),
        Error::SeriesTooShort { .. } => "series_too_short".into(),
        other => other.to_string(),
    }
}

/// Backtests `report` on `prices` and writes the report, step log and plot
/// series into `out`.
pub fn backtest_with(
    cfg: &RunConfig,
    report: &PortfolioReport,
    source: &str,
    prices: &PriceMatrix,
    out: &Path,
) -> Result<BacktestReport> {
    report.validate()?;
    let weights: DVector<f64> = report.aligned_weights(prices.assets())?;
    let bt = &cfg.backtest;
    let s = spread(&weights, prices, bt.t0)?;
    let rule = bt.rule();
    let mut flags = Vec::new();
    let log = match simulate(&s, &rule) {
        Ok(log) => log,
        Err(Error::ZeroVolatilitySpread) => {
            flags.push(flag(&Error::ZeroVolatilitySpread));
            flat_log(s.values())
        }
        Err(e) => return Err(e),
    };
    let end = bt.window_end.unwrap_or(log.len());
    let start = bt.window_start;
    let cum = cumulative_pnl(&log, start, end)?;
    let sr = sharpe(&log, start, end).map_err(|e| flags.push(flag(&e))).ok();
    let df = dickey_fuller(&s.values()[start..end])
        .map_err(|e| flags.push(flag(&e)))
        .ok();
    let st = stamp(cfg);
    let result = BacktestReport {
        schema: BACKTEST_SCHEMA.into(),
        method: report.method.clone(),
        portfolio: source.into(),
        t0: bt.t0,
        window: [start, end],
        open_mult: rule.open_mult,
        close_level: rule.close_level,
        normalization: rule.normalization,
        cumulative_pnl: cum,
        sharpe: sr,
        dickey_fuller: df,
        trades: log.trades(),
        flags,
        config_hash: st.config_hash.clone(),
        seed: st.seed,
    };
    let dates = prices.timestamps();
    write_json(&out.join(BACKTEST_FILE), &result)?;
    write_csv(&out.join("steps.csv"), &st, step_rows(&log, dates))?;
    let panel = |values: &[f64]| -> Vec<SeriesPoint> {
        values
            .iter()
            .enumerate()
            .map(|(t, v)| SeriesPoint {
                method: report.method.clone(),
                t,
                date: dates.map(|d| d[t].clone()),
                value: *v,
            })
            .collect()
    };
    write_csv(&out.join("plot_spread.csv"), &st, panel(&log.spread))?;
    write_csv(&out.join("plot_cum_pnl.csv"), &st, panel(&log.cum_pnl))?;
    Ok(result)
}

pub fn cmd_backtest(cfg: &RunConfig) -> Result<BacktestReport> {
    let prices = read_prices_csv(require(&cfg.prices, "price file (`prices`)")?)?;
    let path = cfg
        .portfolio
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(PORTFOLIO_FILE));
    let report: PortfolioReport = read_json(&path)?;
    // relative to the output directory when inside it, so reruns elsewhere match
    let source = path.strip_prefix(&cfg.output_dir).unwrap_or(&path).display().to_string();
    let result = backtest_with(cfg, &report, &source, &prices, &cfg.output_dir)?;
    write_config(cfg)?;
    Ok(result)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    proxy: ProxyKind,
    q: usize,
    gamma: f64,
    k: usize,
}

impl Cell {
    fn dir_name(&self) -> String {
        format!("{}_q{}_g{}_k{}", self.proxy, self.q, self.gamma, self.k)
    }
}

fn cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    let gammas = cfg.sweep.gammas()?;
    let mut out = Vec::new();
    for &proxy in &cfg.sweep.proxies {
        for &q in &cfg.sweep.q {
            // gamma only enters the crossing-statistics objective
            // the other proxies ignore gamma
            let gs: &[f64] = if proxy == ProxyKind::CrossingStats {
                &gammas
            } else {
                &[0.0]
            };
            for &gamma in gs {
                for &k in &cfg.sweep.k {
                    out.push(Cell { proxy, q, gamma, k });
                }
            }
        }
    }
    Ok(out)
}

fn cell_config(cfg: &RunConfig, cell: &Cell, autocov_path: PathBuf) -> RunConfig {
    let mut c = cfg.clone();
    c.proxy = cell.proxy;
    c.q = cell.q;
    c.gamma = cell.gamma;
    c.k = cell.k;
    c.autocov = Some(autocov_path);
    c.portfolio = None;
    c.output_dir = cfg.output_dir.join("cells").join(cell.dir_name());
    c
}

fn failed_row(method: &str, cell: &Cell, dir: &Path, err: &Error) -> SweepRow {
    SweepRow {
        method: method.into(),
        proxy: cell.proxy,
        q: cell.q,
        gamma: cell.gamma,
        k: cell.k,
        sharpe: None,
        cum_pnl: None,
        df_stat: None,
        kkt_residual: None,
        status: "failed".into(),
        error: Some(err.to_string()),
        cell: dir.to_path_buf(),
    }
}

fn run_cell(cfg: &RunConfig, set: &AutocovSet, assets: &[String], prices: &PriceMatrix) -> Result<SweepRow> {
    let solved = solve_with(cfg, set.truncated(cfg.q)?, assets)?;
    let bt = backtest_with(cfg, &solved.report, PORTFOLIO_FILE, prices, &cfg.output_dir)?;
    Ok(SweepRow {
        method: METHOD.into(),
        proxy: cfg.proxy,
        q: cfg.q,
        gamma: solved.report.gamma.unwrap_or(cfg.gamma),
        k: cfg.k,
        sharpe: bt.sharpe,
        cum_pnl: Some(bt.cumulative_pnl),
        df_stat: bt.dickey_fuller,
        kkt_residual: Some(solved.solve.kkt.stationarity_residual),
        status: if solved.solve.converged() {
            "converged".into()
        } else {
            "max_outer_exceeded".into()
        },
        error: None,
        cell: cfg.output_dir.clone(),
    })
}

/// Outcome of one baseline invocation.
#[derive(Debug)]
pub enum BaselineRun {
    Report(Box<PortfolioReport>),
    /// The program could not be started.
    Unavailable(String),
    Failed(String),
}

/// Runs the external baseline for one cell. The program receives
/// `--autocov --proxy --q --gamma --phi --k --beta --seed --out` after the
/// configured arguments and must write a portfolio report to `--out`.
pub fn run_baseline(cfg: &RunConfig, phi: f64, out: &Path) -> BaselineRun {
    let Some((program, leading)) = cfg.baseline.command.split_first() else {
        return BaselineRun::Unavailable("no baseline command configured".into());
    };
    let Some(autocov) = &cfg.autocov else {
        return BaselineRun::Failed("baseline needs an autocov bundle".into());
    };
    let status = Command::new(program)
        .args(leading)
        .arg("--autocov")
        .arg(autocov)
        .args(["--proxy", cfg.proxy.as_str()])
        .args(["--q", &cfg.q.to_string()])
        .args(["--gamma", &cfg.gamma.to_string()])
        .args(["--phi", &phi.to_string()])
        .args(["--k", &cfg.k.to_string()])
        .args(["--beta", &cfg.baseline.beta.to_string()])
        .args(["--seed", &cfg.seed.to_string()])
        .arg("--out")
        .arg(out)
        .output();
    let output = match status {
        Ok(o) => o,
        Err(e) => return BaselineRun::Unavailable(format!("{program}: {e}")),
    };
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let tail: String = stderr.lines().last().unwrap_or("").chars().take(300).collect();
        return BaselineRun::Failed(format!("{program} exited with {}: {tail}", output.status));
    }
    match read_json::<PortfolioReport>(out).and_then(|r| r.validate().map(|_| r)) {
        Ok(r) => BaselineRun::Report(Box::new(r)),
        Err(e) => BaselineRun::Failed(e.to_string()),
    }
}

fn baseline_cell(cfg: &RunConfig, set: &AutocovSet, prices: &PriceMatrix, cell: &Cell) -> Option<SweepRow> {
    let dir = cfg.output_dir.join("baseline");
    let out = dir.join(PORTFOLIO_FILE);
    let phi = match set.truncated(cfg.q) {
        Ok(s) => resolve_phi(cfg, &s),
        Err(e) => return Some(failed_row("baseline", cell, &dir, &e)),
    };
    if let Err(e) = std::fs::create_dir_all(&dir) {
        return Some(failed_row("baseline", cell, &dir, &Error::io(&dir, e)));
    }
    match run_baseline(cfg, phi, &out) {
        BaselineRun::Unavailable(msg) => {
            log::warn!("baseline skipped: {msg}");
            None
        }
        BaselineRun::Failed(msg) => Some(failed_row("baseline", cell, &dir, &Error::BadParam(msg))),
        BaselineRun::Report(report) => {
            Some(match backtest_with(cfg, &report, PORTFOLIO_FILE, prices, &dir) {
                Ok(bt) => SweepRow {
                    method: report.method.clone(),
                    proxy: cell.proxy,
                    q: cell.q,
                    gamma: cell.gamma,
                    k: cell.k,
                    sharpe: bt.sharpe,
                    cum_pnl: Some(bt.cumulative_pnl),
                    df_stat: bt.dickey_fuller,
                    kkt_residual: None,
                    status: "ok".into(),
                    error: None,
                    cell: dir,
                },
                Err(e) => failed_row(&report.method, cell, &dir, &e),
            })
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
struct SharpePoint<'a> {
    method: &'a str,
    proxy: ProxyKind,
    q: usize,
    gamma: f64,
    k: usize,
    sharpe: Option<f64>,
}

/// Runs every grid cell (in parallel under `exec`), then the baseline when
/// one is configured, and writes the summary table.
pub fn cmd_sweep(cfg: &RunConfig, exec: Execution) -> Result<Vec<SweepRow>> {
    let prices = read_prices_csv(require(&cfg.prices, "price file (`prices`)")?)?;
    let max_q = *cfg.sweep.q.iter().max().expect("validated non-empty");
    let bundle = estimate_bundle(cfg, max_q)?;
    let full = bundle.to_set()?;
    let assets = bundle.assets.clone();
    let mut bundle_paths = Vec::new();
    for &q in &cfg.sweep.q {
        let path = cfg.output_dir.join(format!("autocov_q{q}.json"));
        let mut b = AutocovBundle::new(&full.truncated(q)?, assets.clone(), bundle.provenance.clone());
        b.q = q;
        write_json(&path, &b)?;
        bundle_paths.push((q, path));
    }
    let path_for = |q: usize| bundle_paths.iter().find(|(v, _)| *v == q).map(|(_, p)| p.clone()).expect("q in grid");

    let grid = cells(cfg)?;
    let jobs: Vec<(Cell, RunConfig)> = grid
        .into_iter()
        .map(|c| {
            let cc = cell_config(cfg, &c, path_for(c.q));
            (c, cc)
        })
        .collect();
    let mut rows: Vec<SweepRow> = par_map(exec, &jobs, |(cell, cc)| {
        run_cell(cc, &full, &assets, &prices).unwrap_or_else(|e| failed_row(METHOD, cell, &cc.output_dir, &e))
    });

    if !cfg.baseline.command.is_empty() {
        let baseline: Vec<Option<SweepRow>> =
            par_map(exec, &jobs, |(cell, cc)| baseline_cell(cc, &full, &prices, cell));
        if baseline.iter().all(Option::is_none) {
            log::warn!("baseline unavailable; comparison rows omitted");
        }
        rows.extend(baseline.into_iter().flatten());
    }

    for row in &mut rows {
        if let Ok(rel) = row.cell.strip_prefix(&cfg.output_dir) {
            row.cell = rel.to_path_buf();
        }
    }
    let st = stamp(cfg);
    write_csv(&cfg.output_dir.join(SWEEP_FILE), &st, &rows)?;
    let points = rows.iter().map(|r| SharpePoint {
        method: &r.method,
        proxy: r.proxy,
        q: r.q,
        gamma: r.gamma,
        k: r.k,
        sharpe: r.sharpe,
    });
    write_csv(&cfg.output_dir.join("plot_sharpe_by_k.csv"), &st, points)?;
    write_config(cfg)?;
    Ok(rows)
}
