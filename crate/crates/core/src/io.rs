//! File formats: price CSV, autocovariance bundle, portfolio and backtest
//! reports, and the tidy CSVs behind the plots.
//!
//! JSON files carry a `schema` tag. Every CSV starts with a
//! `# config_hash=… seed=…` comment line.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{Normalization, TradeLog};
use crate::config::hex;
use crate::error::{Error, Result};
use crate::estimation::{PriceMatrix, SeriesKind};
use crate::model::{AutocovSet, ProxyKind};
use crate::ppc::{KktReport, OuterRecord, SolveReport, SolveStatus};

pub const AUTOCOV_SCHEMA: &str = "sparse-meanrev/autocov/v1";
pub const PORTFOLIO_SCHEMA: &str = "sparse-meanrev/portfolio/v1";
pub const BACKTEST_SCHEMA: &str = "sparse-meanrev/backtest/v1";

/// JSON Schema of the portfolio report, for external producers.
pub const PORTFOLIO_JSON_SCHEMA: &str = include_str!("../../../schema/portfolio_report.schema.json");

/// Serializes infinities as `null` and reads `null` back as `+∞`.
pub(crate) mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    fn comment(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Writes `rows` as CSV after the stamp comment.
pub fn write_csv<R: Serialize>(path: &Path, stamp: &Stamp, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut buf = stamp.comment().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row).map_err(|e| Error::parse(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    write_text(path, &String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Reads a CSV written by [`write_csv`], skipping the stamp.
pub fn read_csv<R: DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::parse(path, e.to_string())))
        .collect()
}

// ---------------------------------------------------------------- prices

/// Reads prices with one column per asset. A leading `date` column holds
/// ISO dates (`YYYY-MM-DD`). Errors name the file line and column (1-based).
pub fn read_prices_csv(path: &Path) -> Result<PriceMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prices_csv(&text, path)
}

pub fn parse_prices_csv(text: &str, origin: &Path) -> Result<PriceMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(origin, e.to_string()))?
        .clone();
    let dated = header.get(0).is_some_and(|h| h.eq_ignore_ascii_case("date"));
    let first = usize::from(dated);
    let assets: Vec<String> = header.iter().skip(first).map(str::to_owned).collect();
    if assets.is_empty() {
        return Err(Error::parse(origin, "line 1: no asset columns"));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = assets.iter().find(|a| !seen.insert(a.as_str())) {
        return Err(Error::parse(origin, format!("line 1: duplicate asset '{dup}'")));
    }
    let mut values = Vec::new();
    let mut dates = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::parse(origin, format!("line {line}: {e}")))?;
        if record.len() != header.len() {
            return Err(Error::parse(
                origin,
                format!("line {line}: expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        if dated {
            let raw = &record[0];
            let date = NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| {
                Error::parse(origin, format!("line {line}, column 1: '{raw}' is not a YYYY-MM-DD date"))
            })?;
            if let Some(prev) = dates.last() {
                if date <= *prev {
                    return Err(Error::parse(
                        origin,
                        format!("line {line}, column 1: dates must be strictly increasing"),
                    ));
                }
            }
            dates.push(date);
        }
        for (j, asset) in assets.iter().enumerate() {
            let column = first + j + 1;
            let raw = &record[first + j];
            let value: f64 = raw.parse().map_err(|_| {
                Error::parse(origin, format!("line {line}, column {column}: '{raw}' is not a number"))
            })?;
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositivePrice {
                    row: line,
                    column,
                    asset: asset.clone(),
                    value,
                });
            }
            values.push(value);
        }
    }
    if values.is_empty() {
        return Err(Error::parse(origin, "no price rows"));
    }
    let rows = values.len() / assets.len();
    let matrix = DMatrix::from_row_slice(rows, assets.len(), &values);
    let stamps = dated.then(|| dates.iter().map(|d| d.format("%Y-%m-%d").to_string()).collect());
    PriceMatrix::new(matrix, assets, stamps)
}

/// Writes prices in the format read by [`read_prices_csv`]. Rows without a
/// timestamp get consecutive days from 2000-01-01.
pub fn write_prices_csv(path: &Path, prices: &PriceMatrix) -> Result<()> {
    let mut out = String::from("date");
    for a in prices.assets() {
        out.push(',');
        out.push_str(a);
    }
    out.push('\n');
    let origin = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
    for t in 0..prices.len() {
        match prices.timestamps() {
            Some(ts) => out.push_str(&ts[t]),
            None => out.push_str(&(origin + chrono::Days::new(t as u64)).format("%Y-%m-%d").to_string()),
        }
        for j in 0..prices.n_assets() {
            out.push(',');
            out.push_str(&prices.values()[(t, j)].to_string());
        }
        out.push('\n');
    }
    write_text(path, &out)
}

// ---------------------------------------------------------------- autocov

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<String>,
    pub source_sha256: Option<String>,
    pub series: SeriesKind,
    /// Rows of the price file used, `[start, end)`.
    pub rows: [usize; 2],
    /// Lags were averaged with their transposes.
    pub symmetrized: bool,
    /// Eigenvalues clipped at 0 for lags ≥ 1 and at `a0_floor` for `A_0`.
    pub psd_repaired: bool,
    pub a0_floor: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// `A_0..A_q` as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutocovBundle {
    pub schema: String,
    pub assets: Vec<String>,
    pub q: usize,
    pub matrices: Vec<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl AutocovBundle {
    pub fn new(set: &AutocovSet, assets: Vec<String>, provenance: Provenance) -> Self {
        let matrices = set
            .matrices()
            .iter()
            .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect();
        Self {
            schema: AUTOCOV_SCHEMA.into(),
            assets,
            q: set.lag_count(),
            matrices,
            provenance,
        }
    }

    pub fn to_set(&self) -> Result<AutocovSet> {
        if self.schema != AUTOCOV_SCHEMA {
            return Err(Error::BadParam(format!("unsupported autocov schema '{}'", self.schema)));
        }
        let n = self.assets.len();
        if self.matrices.len() != self.q + 1 {
            return Err(Error::BadParam(format!(
                "bundle declares q = {} but holds {} matrices",
                self.q,
                self.matrices.len()
            )));
        }
        let mats = self
            .matrices
            .iter()
            .map(|rows| {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: rows.len(),
                    });
                }
                Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
            })
            .collect::<Result<Vec<_>>>()?;
        AutocovSet::new(mats)
    }
}

// ---------------------------------------------------------------- portfolio

/// Solver diagnostics attached to reports from this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDetails {
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub rho0: f64,
    pub rho_final: f64,
    pub upsilon: f64,
    pub start_index: usize,
    pub restored: bool,
    pub polished: bool,
    pub descent_steps: usize,
    pub kkt: KktReport,
    pub feasible_volatility: f64,
    pub x_feas: Vec<f64>,
    pub raw_x: Vec<f64>,
    pub raw_y: Vec<f64>,
    pub raw_z: Vec<f64>,
    pub outer_trace: Vec<OuterRecord>,
}

impl From<&SolveReport> for SolveDetails {
    fn from(r: &SolveReport) -> Self {
        Self {
            status: r.status,
            outer_iterations: r.outer_iterations,
            rho0: r.rho0,
            rho_final: r.rho_final,
            upsilon: r.upsilon,
            start_index: r.start_index,
            restored: r.restored,
            polished: r.polished,
            descent_steps: r.descent_steps,
            kkt: r.kkt.clone(),
            feasible_volatility: r.feasible.volatility,
            x_feas: r.feasible.x.iter().copied().collect(),
            raw_x: r.raw_x.iter().copied().collect(),
            raw_y: r.raw_y.iter().copied().collect(),
            raw_z: r.raw_z.iter().copied().collect(),
            outer_trace: r.outer_trace.clone(),
        }
    }
}

/// Portfolio report shared by every method. Fields this crate does not know
/// are kept in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    pub schema: String,
    pub method: String,
    pub assets: Vec<String>,
    pub weights: IndexMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<ProxyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volatility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveDetails>,
    #[serde(flatten)]
    pub extra: IndexMap<String, serde_json::Value>,
}

impl PortfolioReport {
    pub fn new(method: &str, assets: &[String], weights: &DVector<f64>) -> Self {
        Self {
            schema: PORTFOLIO_SCHEMA.into(),
            method: method.into(),
            assets: assets.to_vec(),
            weights: assets.iter().cloned().zip(weights.iter().copied()).collect(),
            proxy: None,
            q: None,
            gamma: None,
            phi: None,
            k: None,
            objective: None,
            volatility: None,
            config_hash: None,
            seed: None,
            solve: None,
            extra: IndexMap::new(),
        }
    }

    /// Structural checks; the weights need not be normalized.
    pub fn validate(&self) -> Result<()> {
        if self.schema != PORTFOLIO_SCHEMA {
            return Err(Error::BadParam(format!("unsupported portfolio schema '{}'", self.schema)));
        }
        if self.method.is_empty() || self.assets.is_empty() {
            return Err(Error::BadParam("report needs a method and at least one asset".into()));
        }
        if self.weights.len() != self.assets.len()
            || self.weights.keys().zip(&self.assets).any(|(a, b)| a != b)
        {
            return Err(Error::BadParam("weights must be keyed by `assets`, in order".into()));
        }
        if let Some((asset, w)) = self.weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::BadParam(format!("weight of {asset} is {w}")));
        }
        if let Some(k) = self.k {
            let nnz = self.weights.values().filter(|w| **w != 0.0).count();
            if nnz > k {
                return Err(Error::BadParam(format!("{nnz} nonzero weights exceed k = {k}")));
            }
        }
        Ok(())
    }

    pub fn weight_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.weights.len(), self.weights.values().copied())
    }

    /// Weights in the column order of `assets`; assets missing from the
    /// report get weight 0.
    pub fn aligned_weights(&self, assets: &[String]) -> Result<DVector<f64>> {
        if let Some(missing) = self.assets.iter().find(|a| !assets.contains(a)) {
            return Err(Error::BadParam(format!("portfolio asset '{missing}' is not in the price data")));
        }
        Ok(DVector::from_iterator(
            assets.len(),
            assets.iter().map(|a| self.weights.get(a).copied().unwrap_or(0.0)),
        ))
    }
}

// ---------------------------------------------------------------- backtest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub schema: String,
    pub method: String,
    /// Report path, relative to the output directory when it lies inside it.
    pub portfolio: String,
    pub t0: usize,
    pub window: [usize; 2],
    pub open_mult: f64,
    pub close_level: f64,
    pub normalization: Normalization,
    pub cumulative_pnl: f64,
    pub sharpe: Option<f64>,
    pub dickey_fuller: Option<f64>,
    pub trades: usize,
    /// Conditions under which a metric could not be computed.
    pub flags: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: usize,
    pub date: Option<String>,
    pub spread: f64,
    pub z: f64,
    pub position: i8,
    pub pnl: f64,
    pub roi: f64,
    pub cum_pnl: f64,
}

pub fn step_rows(log: &TradeLog, dates: Option<&[String]>) -> Vec<StepRow> {
    (0..log.len())
        .map(|t| StepRow {
            t,
            date: dates.map(|d| d[t].clone()),
            spread: log.spread[t],
            z: log.z[t],
            position: log.position[t],
            pnl: log.pnl[t],
            roi: log.roi[t],
            cum_pnl: log.cum_pnl[t],
        })
        .collect()
}

/// One point of a time-series plot panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub method: String,
    pub t: usize,
    pub date: Option<String>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRow {
    pub outer: usize,
    pub rho: f64,
    pub gap: f64,
    pub gap_two_norm: f64,
    pub gap_bound: f64,
    pub q_rho: f64,
    pub reset: bool,
    pub inner_iterations: usize,
    pub inner_converged: bool,
}

impl From<&OuterRecord> for OuterRow {
    fn from(r: &OuterRecord) -> Self {
        Self {
            outer: r.outer,
            rho: r.rho,
            gap: r.gap,
            gap_two_norm: r.gap_two_norm,
            gap_bound: r.gap_bound,
            q_rho: r.q_rho,
            reset: r.reset,
            inner_iterations: r.inner_iterations,
            inner_converged: r.inner_converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRow {
    pub outer: usize,
    pub iteration: usize,
    pub q_rho: f64,
    pub move_x: f64,
    pub move_y: f64,
    pub move_z: f64,
    pub lambda: f64,
    pub active: bool,
}

pub fn inner_rows(report: &SolveReport) -> Vec<InnerRow> {
    report
        .inner_traces
        .iter()
        .enumerate()
        .flat_map(|(j, trace)| {
            trace.records.iter().map(move |r| InnerRow {
                outer: j + 1,
                iteration: r.iteration,
                q_rho: r.q_rho(),
                move_x: r.move_x,
                move_y: r.move_y,
                move_z: r.move_z,
                lambda: r.lambda,
                active: r.active,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub proxy: ProxyKind,
    pub q: usize,
    pub gamma: f64,
    pub k: usize,
    pub sharpe: Option<f64>,
    pub cum_pnl: Option<f64>,
    pub df_stat: Option<f64>,
    pub kkt_residual: Option<f64>,
    pub status: String,
    pub error: Option<String>,
    /// Cell directory relative to the sweep output directory.
    pub cell: PathBuf,
}
