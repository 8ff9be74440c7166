//! From price histories to the autocovariance set of problem (P), plus a
//! seeded VAR(1) generator for desk-scale experiments.
//!
//! The lag-`s` estimate pairs `x̃_t` with `x̃_{t+s}` (the usual lagged
//! cross-product). Raw lag estimates are asymmetric in general; they are
//! symmetrized and projected onto the PSD cone by [`make_psd`] before being
//! handed to the solver.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sorted_eigen;
use crate::model::AutocovSet;

/// `T × n` matrix of strictly positive prices, one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceMatrix {
    values: DMatrix<f64>,
    assets: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl PriceMatrix {
    pub fn new(
        values: DMatrix<f64>,
        assets: Vec<String>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        if assets.len() != values.ncols() {
            return Err(Error::DimensionMismatch {
                expected: values.ncols(),
                found: assets.len(),
            });
        }
        if let Some(ts) = &timestamps {
            if ts.len() != values.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: values.nrows(),
                    found: ts.len(),
                });
            }
        }
        for row in 0..values.nrows() {
            for column in 0..values.ncols() {
                let value = values[(row, column)];
                if !(value > 0.0) || !value.is_finite() {
                    return Err(Error::NonPositivePrice {
                        row,
                        column,
                        asset: assets[column].clone(),
                        value,
                    });
                }
            }
        }
        Ok(Self {
            values,
            assets,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_assets(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn log_levels(&self) -> SeriesMatrix {
        SeriesMatrix {
            values: self.values.map(f64::ln),
        }
    }

    pub fn levels(&self) -> SeriesMatrix {
        SeriesMatrix {
            values: self.values.clone(),
        }
    }
}

/// `T × n` matrix of finite observations (levels or returns).
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    values: DMatrix<f64>,
}

impl SeriesMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadParam("series contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_assets(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Which transformation of prices feeds the autocovariance estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeriesKind {
    LogPrices,
    LogReturns,
    Prices,
}

impl SeriesKind {
    pub fn apply(self, prices: &PriceMatrix, tau: usize) -> Result<SeriesMatrix> {
        match self {
            SeriesKind::LogPrices => Ok(prices.log_levels()),
            SeriesKind::Prices => Ok(prices.levels()),
            SeriesKind::LogReturns => log_returns(prices, tau),
        }
    }
}

/// Row `t` holds `ln p_t − ln p_{t−τ}`; the output has `T − τ` rows.
pub fn log_returns(prices: &PriceMatrix, tau: usize) -> Result<SeriesMatrix> {
    let len = prices.len();
    if tau == 0 || tau >= len {
        return Err(Error::TauTooLarge { tau, len });
    }
    let logs = prices.values.map(f64::ln);
    let rows = len - tau;
    let values = DMatrix::from_fn(rows, prices.n_assets(), |t, j| {
        logs[(t + tau, j)] - logs[(t, j)]
    });
    Ok(SeriesMatrix { values })
}

/// Lag-`s` empirical autocovariance
/// `Γ_s = 1/(T−s−1) · Σ_{t=1}^{T−s} x̃_t x̃_{t+s}ᵀ` with `x̃_t = x_t − mean`.
///
/// The result is not symmetrized.
pub fn autocov(series: &SeriesMatrix, s: usize) -> Result<DMatrix<f64>> {
    let t_len = series.len();
    if t_len < s + 2 {
        return Err(Error::SeriesTooShort {
            needed: s + 2,
            got: t_len,
        });
    }
    let mean = series.values.row_mean();
    let centered = DMatrix::from_fn(t_len, series.n_assets(), |t, j| {
        series.values[(t, j)] - mean[j]
    });
    let head = centered.rows(0, t_len - s);
    let tail = centered.rows(s, t_len - s);
    Ok(head.transpose() * tail / (t_len - s - 1) as f64)
}

/// Nearest symmetric matrix (Frobenius) to `(M + Mᵀ)/2` whose eigenvalues are
/// all at least `floor`.
pub fn make_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let (values, vectors) = sorted_eigen(m);
    let clipped = values.map(|v| v.max(floor));
    let rebuilt = &vectors * DMatrix::from_diagonal(&clipped) * vectors.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

/// Eigenvalue floor applied to `A_0`: `1e-8 · trace(Γ_0) / n`.
pub fn default_a0_floor(gamma0: &DMatrix<f64>) -> f64 {
    1e-8 * gamma0.trace() / gamma0.nrows() as f64
}

/// Repaired lag matrices `A_0..A_{max_lag}` without the `q ≥ 2` requirement of
/// [`AutocovSet`].
pub fn lag_matrices(series: &SeriesMatrix, max_lag: usize, a0_floor: f64) -> Result<Vec<DMatrix<f64>>> {
    if series.len() < max_lag + 2 {
        return Err(Error::SeriesTooShort {
            needed: max_lag + 2,
            got: series.len(),
        });
    }
    (0..=max_lag)
        .map(|s| {
            let raw = autocov(series, s)?;
            Ok(make_psd(&raw, if s == 0 { a0_floor } else { 0.0 }))
        })
        .collect()
}

/// Estimates `A_0..A_q` and repairs them into a valid [`AutocovSet`].
pub fn build_autocov_set(series: &SeriesMatrix, q: usize, a0_floor: f64) -> Result<AutocovSet> {
    if q < 2 {
        return Err(Error::BadParam(format!("q must be >= 2, got {q}")));
    }
    if !(a0_floor > 0.0) {
        return Err(Error::BadParam(format!(
            "a0_floor must be > 0, got {a0_floor}"
        )));
    }
    AutocovSet::new(lag_matrices(series, q, a0_floor)?)
}

/// Like [`build_autocov_set`] with the floor chosen by [`default_a0_floor`].
pub fn build_autocov_set_default(series: &SeriesMatrix, q: usize) -> Result<AutocovSet> {
    let g0 = autocov(series, 0)?;
    let floor = default_a0_floor(&g0);
    if !(floor > 0.0) {
        return Err(Error::BadParam(
            "series has zero variance; cannot build a positive definite A_0".into(),
        ));
    }
    build_autocov_set(series, q, floor)
}

/// Simulates `x_{t+1} = B x_t + ε_t` from `x_0 = 0`, returning `x_1..x_T`.
///
/// `B` is a Gaussian random matrix rescaled to the requested spectral radius;
/// `ε_t ~ N(0, noise_sd² I)`.
pub fn synth_var1(
    n: usize,
    t_len: usize,
    spectral_radius: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<SeriesMatrix> {
    let (series, _) = synth_var1_with_transition(n, t_len, spectral_radius, noise_sd, seed)?;
    Ok(series)
}

/// [`synth_var1`] that also returns the transition matrix `B`.
pub fn synth_var1_with_transition(
    n: usize,
    t_len: usize,
    spectral_radius: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<(SeriesMatrix, DMatrix<f64>)> {
    if n == 0 || t_len == 0 {
        return Err(Error::BadParam("n and T must be positive".into()));
    }
    if !(spectral_radius > 0.0 && spectral_radius < 1.0) {
        return Err(Error::BadParam(format!(
            "spectral radius must lie in (0, 1), got {spectral_radius}"
        )));
    }
    if !(noise_sd > 0.0) || !noise_sd.is_finite() {
        return Err(Error::BadParam(format!(
            "noise_sd must be > 0, got {noise_sd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let radius = raw
        .complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0_f64, f64::max);
    let b = if radius > 0.0 {
        raw * (spectral_radius / radius)
    } else {
        DMatrix::identity(n, n) * spectral_radius
    };
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::BadParam(e.to_string()))?;
    let mut state = DVector::<f64>::zeros(n);
    let mut values = DMatrix::zeros(t_len, n);
    for t in 0..t_len {
        let eps = DVector::from_fn(n, |_, _| noise.sample(&mut rng));
        state = &b * &state + eps;
        values.set_row(t, &state.transpose());
    }
    Ok((SeriesMatrix { values }, b))
}

/// Prices `exp(base + x_t)` for a level series, so that log-prices recover `x`
/// up to the constant.
pub fn levels_to_prices(series: &SeriesMatrix, base: f64, assets: Vec<String>) -> Result<PriceMatrix> {
    PriceMatrix::new(series.values.map(|v| (base + v).exp()), assets, None)
}
