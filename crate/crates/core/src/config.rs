//! Run configuration shared by every subcommand.
//!
//! A run is described by one TOML file. Top-level keys cover data and problem
//! parameters; `[solver]`, `[backtest]`, `[sweep]` and `[baseline]` hold the
//! rest. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{BandRule, Normalization};
use crate::error::{Error, Result};
use crate::estimation::SeriesKind;
use crate::model::{ProxyKind, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    Absolute,
    /// `φ = phi_value · median(diag A_0)`.
    MedianVarianceFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub open_mult: f64,
    pub close_level: f64,
    /// Trailing window for the spread statistics; full sample when absent.
    pub rolling_window: Option<usize>,
    /// Epoch row of the spread.
    pub t0: usize,
    /// Metric window `[window_start, window_end)`; the end defaults to the
    /// last row.
    pub window_start: usize,
    pub window_end: Option<usize>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        let rule = BandRule::default();
        Self {
            open_mult: rule.open_mult,
            close_level: rule.close_level,
            rolling_window: None,
            t0: 0,
            window_start: 0,
            window_end: None,
        }
    }
}

impl BacktestConfig {
    pub fn rule(&self) -> BandRule {
        BandRule {
            open_mult: self.open_mult,
            close_level: self.close_level,
            normalization: match self.rolling_window {
                Some(window) => Normalization::Rolling { window },
                None => Normalization::Full,
            },
        }
    }
}

/// Arithmetic grid `start, start + step, …` up to `end` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaRange {
    pub start: f64,
    pub step: f64,
    pub end: f64,
}

impl GammaRange {
    /// The tuning grid `0.0001, 0.001, …, 1`.
    pub fn tuning() -> Self {
        Self {
            start: 1e-4,
            step: 9e-4,
            end: 1.0,
        }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.start > 0.0) || !(self.end >= self.start) {
            return Err(Error::BadParam(format!(
                "gamma range needs 0 < start <= end and step > 0, got {self:?}"
            )));
        }
        let count = ((self.end - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|i| self.start + i as f64 * self.step)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub proxies: Vec<ProxyKind>,
    pub q: Vec<usize>,
    pub gamma: Vec<f64>,
    /// Replaces `gamma` when present.
    pub gamma_range: Option<GammaRange>,
    pub k: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            proxies: ProxyKind::ALL.to_vec(),
            q: vec![3],
            gamma: vec![1e-3],
            gamma_range: None,
            k: vec![5, 10, 17],
        }
    }
}

impl SweepConfig {
    pub fn gammas(&self) -> Result<Vec<f64>> {
        match &self.gamma_range {
            Some(range) => range.values(),
            None => Ok(self.gamma.clone()),
        }
    }
}

/// External comparison solver run once per sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Program and leading arguments; the sweep appends the cell arguments.
    /// Skipped when empty or when the program cannot be started.
    pub command: Vec<String>,
    /// ℓ₁ weight of the relaxation.
    pub beta: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prices: Option<PathBuf>,
    pub autocov: Option<PathBuf>,
    pub portfolio: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub series: SeriesKind,
    /// Rows `[start, end)` of the price file used for estimation.
    pub estimation_rows: Option<[usize; 2]>,
    pub proxy: ProxyKind,
    pub q: usize,
    pub gamma: f64,
    pub phi_mode: PhiMode,
    pub phi_value: f64,
    pub k: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub backtest: BacktestConfig,
    pub sweep: SweepConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prices: None,
            autocov: None,
            portfolio: None,
            output_dir: PathBuf::from("out"),
            series: SeriesKind::LogPrices,
            estimation_rows: None,
            proxy: ProxyKind::CrossingStats,
            q: 3,
            gamma: 1e-3,
            phi_mode: PhiMode::MedianVarianceFraction,
            phi_value: 0.3,
            k: 5,
            seed: 0,
            solver: SolverConfig::default(),
            backtest: BacktestConfig::default(),
            sweep: SweepConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.backtest.rule().validate()?;
        if self.q < 2 {
            return Err(Error::BadParam(format!("q must be >= 2, got {}", self.q)));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::BadParam(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.phi_value > 0.0) || !self.phi_value.is_finite() {
            return Err(Error::BadParam(format!(
                "phi_value must be > 0, got {}",
                self.phi_value
            )));
        }
        if self.k == 0 {
            return Err(Error::BadParam("k must be >= 1".into()));
        }
        if let Some([start, end]) = self.estimation_rows {
            if start >= end {
                return Err(Error::BadParam(format!(
                    "estimation_rows must satisfy start < end, got [{start}, {end}]"
                )));
            }
        }
        if let Some(end) = self.backtest.window_end {
            if end <= self.backtest.window_start {
                return Err(Error::BadParam("backtest window is empty".into()));
            }
        }
        let sweep = &self.sweep;
        if sweep.proxies.is_empty() || sweep.q.is_empty() || sweep.k.is_empty() {
            return Err(Error::BadParam("sweep grids must be non-empty".into()));
        }
        if sweep.q.iter().any(|&q| q < 2) || sweep.k.contains(&0) {
            return Err(Error::BadParam("sweep needs q >= 2 and k >= 1".into()));
        }
        let gammas = sweep.gammas()?;
        if gammas.is_empty() || gammas.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::BadParam("sweep gammas must be finite and >= 0".into()));
        }
        if !(self.baseline.beta > 0.0) {
            return Err(Error::BadParam(format!(
                "baseline beta must be > 0, got {}",
                self.baseline.beta
            )));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config with the output directory cleared, so
    /// the same run written elsewhere hashes identically.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        hex(&Sha256::digest(canonical.to_toml().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Contents of the shipped `config/defaults.toml`.
pub const SHIPPED_DEFAULTS: &str = include_str!("../../../config/defaults.toml");
