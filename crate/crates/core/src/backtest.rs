//! Band trading on a fixed portfolio and the usual performance numbers.
//!
//! Time indices are 0-based rows of the price matrix. Metric windows are
//! half-open, `[t1, t2)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::PriceMatrix;

/// Portfolio log-value relative to the strategy epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadSeries {
    values: Vec<f64>,
    weight_l1: f64,
}

impl SpreadSeries {
    /// `weight_l1` is `‖x‖₁`, the ROI denominator.
    pub fn new(values: Vec<f64>, weight_l1: f64) -> Result<Self> {
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadParam(format!("spread value at t={t} is not finite")));
        }
        if !(weight_l1 >= 0.0) || !weight_l1.is_finite() {
            return Err(Error::BadParam(format!("weight l1 norm must be >= 0, got {weight_l1}")));
        }
        Ok(Self { values, weight_l1 })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weight_l1(&self) -> f64 {
        self.weight_l1
    }

    /// Full-sample mean and population standard deviation.
    pub fn mean_sd(&self) -> (f64, f64) {
        mean_sd(&self.values)
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let len = values.len() as f64;
    let mean = values.iter().sum::<f64>() / len;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
    (mean, var.sqrt())
}

/// `s_t = Σ_i x_i (ln p_{t,i} − ln p_{t0,i})`.
pub fn spread(weights: &DVector<f64>, prices: &PriceMatrix, t0: usize) -> Result<SpreadSeries> {
    if weights.len() != prices.n_assets() {
        return Err(Error::DimensionMismatch {
            expected: prices.n_assets(),
            found: weights.len(),
        });
    }
    if t0 >= prices.len() {
        return Err(Error::BadWindow {
            start: t0,
            end: t0 + 1,
            len: prices.len(),
        });
    }
    let logs = prices.log_levels();
    let logs = logs.values();
    let base: f64 = (0..weights.len()).map(|i| weights[i] * logs[(t0, i)]).sum();
    let values = (0..prices.len())
        .map(|t| (0..weights.len()).map(|i| weights[i] * logs[(t, i)]).sum::<f64>() - base)
        .collect();
    SpreadSeries::new(values, weights.lp_norm(1))
}

/// How the spread is turned into the score compared against the band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Normalization {
    /// Mean and sd of the whole series.
    Full,
    /// Mean and sd of the trailing `window` values up to and including `t`.
    Rolling { window: usize },
    /// Externally supplied statistics.
    Fixed { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandRule {
    /// Open when `|z|` reaches this many standard deviations.
    pub open_mult: f64,
    /// Close a short once `z ≤ close_level`, a long once `z ≥ −close_level`.
    pub close_level: f64,
    pub normalization: Normalization,
}

impl Default for BandRule {
    fn default() -> Self {
        Self {
            open_mult: 1.0,
            close_level: 0.0,
            normalization: Normalization::Full,
        }
    }
}

impl BandRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.open_mult > 0.0) || !self.open_mult.is_finite() {
            return Err(Error::BadParam(format!(
                "open_mult must be > 0, got {}",
                self.open_mult
            )));
        }
        if !self.close_level.is_finite() {
            return Err(Error::BadParam("close_level must be finite".into()));
        }
        match self.normalization {
            Normalization::Rolling { window } if window < 2 => Err(Error::BadParam(format!(
                "rolling window must be >= 2, got {window}"
            ))),
            Normalization::Fixed { mean, sd } if !mean.is_finite() || !sd.is_finite() => {
                Err(Error::BadParam("fixed normalization must be finite".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLog {
    pub spread: Vec<f64>,
    pub z: Vec<f64>,
    /// Position held after the decision at `t`: −1, 0 or +1.
    pub position: Vec<i8>,
    pub pnl: Vec<f64>,
    pub roi: Vec<f64>,
    pub cum_pnl: Vec<f64>,
}

impl TradeLog {
    pub fn len(&self) -> usize {
        self.spread.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spread.is_empty()
    }

    /// Number of positions opened.
    pub fn trades(&self) -> usize {
        let mut prev = 0;
        let mut count = 0;
        for &p in &self.position {
            if p != 0 && prev == 0 {
                count += 1;
            }
            prev = p;
        }
        count
    }
}

fn zscores(spread: &SpreadSeries, norm: Normalization) -> Result<Vec<f64>> {
    let values = spread.values();
    match norm {
        Normalization::Fixed { mean, sd } => {
            if !(sd > 0.0) {
                return Err(Error::ZeroVolatilitySpread);
            }
            Ok(values.iter().map(|v| (v - mean) / sd).collect())
        }
        Normalization::Full => {
            let (mean, sd) = spread.mean_sd();
            if !(sd > 0.0) {
                return Err(Error::ZeroVolatilitySpread);
            }
            Ok(values.iter().map(|v| (v - mean) / sd).collect())
        }
        Normalization::Rolling { window } => {
            if !(spread.mean_sd().1 > 0.0) {
                return Err(Error::ZeroVolatilitySpread);
            }
            Ok((0..values.len())
                .map(|t| {
                    let start = (t + 1).saturating_sub(window);
                    let (mean, sd) = mean_sd(&values[start..=t]);
                    if t > start && sd > 0.0 {
                        (values[t] - mean) / sd
                    } else {
                        0.0
                    }
                })
                .collect())
        }
    }
}

/// Runs the band rule over the spread.
///
/// A flat book opens short at `z ≥ open_mult` and long at `z ≤ −open_mult`;
/// the P&L at `t` is `position_{t−1}·(s_t − s_{t−1})`.
pub fn simulate(spread: &SpreadSeries, rule: &BandRule) -> Result<TradeLog> {
    rule.validate()?;
    let z = zscores(spread, rule.normalization)?;
    let s = spread.values();
    let len = s.len();
    let mut position = Vec::with_capacity(len);
    let mut pnl = Vec::with_capacity(len);
    let mut cum_pnl = Vec::with_capacity(len);
    let mut held: i8 = 0;
    let mut total = 0.0;
    for t in 0..len {
        let step = if t == 0 || held == 0 {
            0.0
        } else {
            f64::from(held) * (s[t] - s[t - 1])
        };
        total += step;
        pnl.push(step);
        cum_pnl.push(total);
        held = match held {
            0 if z[t] >= rule.open_mult => -1,
            0 if z[t] <= -rule.open_mult => 1,
            -1 if z[t] <= rule.close_level => 0,
            1 if z[t] >= -rule.close_level => 0,
            p => p,
        };
        position.push(held);
    }
    let l1 = spread.weight_l1();
    let roi = pnl
        .iter()
        .map(|p| if l1 > 0.0 { p / l1 } else { 0.0 })
        .collect();
    Ok(TradeLog {
        spread: s.to_vec(),
        z,
        position,
        pnl,
        roi,
        cum_pnl,
    })
}

fn check_window(t1: usize, t2: usize, len: usize) -> Result<()> {
    if t1 >= t2 || t2 > len {
        return Err(Error::BadWindow {
            start: t1,
            end: t2,
            len,
        });
    }
    Ok(())
}

/// `μ_ROI/σ_ROI` over `[t1, t2)`, with the population variance.
pub fn sharpe(log: &TradeLog, t1: usize, t2: usize) -> Result<f64> {
    check_window(t1, t2, log.len())?;
    let window = &log.roi[t1..t2];
    let (mean, sd) = mean_sd(window);
    let scale = window.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if !(sd > 1e-14 * scale) {
        return Err(Error::ZeroVariance);
    }
    Ok(mean / sd)
}

/// Sum of `P&L_t` over `[t1, t2)`.
pub fn cumulative_pnl(log: &TradeLog, t1: usize, t2: usize) -> Result<f64> {
    check_window(t1, t2, log.len())?;
    Ok(log.pnl[t1..t2].iter().sum())
}

/// t-statistic of `β` in `Δs_t = β s_{t−1} + e_t` (no constant).
pub fn dickey_fuller(series: &[f64]) -> Result<f64> {
    if series.len() < 4 {
        return Err(Error::SeriesTooShort {
            needed: 4,
            got: series.len(),
        });
    }
    let lagged = &series[..series.len() - 1];
    let sxx: f64 = lagged.iter().map(|v| v * v).sum();
    if !(sxx > 0.0) {
        return Err(Error::DegenerateRegression);
    }
    let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let sxy: f64 = lagged.iter().zip(&diffs).map(|(x, y)| x * y).sum();
    let beta = sxy / sxx;
    let rss: f64 = lagged
        .iter()
        .zip(&diffs)
        .map(|(x, y)| (y - beta * x).powi(2))
        .sum();
    let dof = (diffs.len() - 1) as f64;
    let sigma2 = rss / dof;
    let tss: f64 = diffs.iter().map(|y| y * y).sum();
    if !(sigma2 > 1e-28 * tss.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateRegression);
    }
    Ok(beta / (sigma2 / sxx).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::E;

    fn unit_rule() -> BandRule {
        BandRule {
            normalization: Normalization::Fixed { mean: 0.0, sd: 1.0 },
            ..BandRule::default()
        }
    }

    fn series(values: &[f64]) -> SpreadSeries {
        SpreadSeries::new(values.to_vec(), 1.0).unwrap()
    }

    fn log_with_roi(roi: &[f64]) -> TradeLog {
        TradeLog {
            spread: vec![0.0; roi.len()],
            z: vec![0.0; roi.len()],
            position: vec![0; roi.len()],
            pnl: roi.to_vec(),
            roi: roi.to_vec(),
            cum_pnl: vec![0.0; roi.len()],
        }
    }

    fn prices(rows: usize, cols: usize, values: &[f64]) -> PriceMatrix {
        let names = (0..cols).map(|i| format!("A{i}")).collect();
        PriceMatrix::new(DMatrix::from_row_slice(rows, cols, values), names, None).unwrap()
    }

    #[test]
    fn spread_hand_logs() {
        let p = prices(3, 1, &[1.0, E, E * E]);
        let s = spread(&DVector::from_element(1, 1.0), &p, 0).unwrap();
        assert_abs_diff_eq!(s.values()[0], 0.0);
        assert_abs_diff_eq!(s.values()[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.values()[2], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn spread_trivial_cases() {
        let p = prices(3, 2, &[1.0, 2.0, 1.5, 3.0, 0.5, 4.0]);
        let zero = spread(&DVector::zeros(2), &p, 1).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
        let flat = prices(3, 2, &[2.0, 3.0, 2.0, 3.0, 2.0, 3.0]);
        let s = spread(&DVector::from_vec(vec![0.3, -0.7]), &flat, 2).unwrap();
        assert!(s.values().iter().all(|v| v.abs() < 1e-15));
        assert_eq!(s.values()[2], 0.0);
        assert!(matches!(
            spread(&DVector::zeros(3), &p, 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(spread(&DVector::zeros(2), &p, 3), Err(Error::BadWindow { .. })));
    }

    #[test]
    fn short_round_trip_pays_two() {
        let log = simulate(&series(&[0.0, 2.0, 0.0]), &unit_rule()).unwrap();
        assert_eq!(log.position, vec![0, -1, 0]);
        assert_eq!(log.pnl, vec![0.0, 0.0, 2.0]);
        assert_eq!(cumulative_pnl(&log, 0, 3).unwrap(), 2.0);
        assert_eq!(cumulative_pnl(&log, 2, 3).unwrap(), 2.0);
        assert_eq!(log.trades(), 1);
    }

    #[test]
    fn full_sample_normalization_gives_same_round_trip() {
        let log = simulate(&series(&[0.0, 2.0, 0.0]), &BandRule::default()).unwrap();
        assert_eq!(log.position, vec![0, -1, 0]);
        assert_eq!(log.cum_pnl[2], 2.0);
    }

    #[test]
    fn zero_spread_is_rejected_or_flat() {
        let zero = series(&[0.0; 5]);
        assert!(matches!(
            simulate(&zero, &BandRule::default()),
            Err(Error::ZeroVolatilitySpread)
        ));
        let log = simulate(&zero, &unit_rule()).unwrap();
        assert!(log.position.iter().all(|p| *p == 0));
        assert_eq!(cumulative_pnl(&log, 0, 5).unwrap(), 0.0);
    }

    #[test]
    fn mirrored_spread_mirrors_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..300).map(|_| rng.random_range(-2.0..2.0)).collect();
        let flipped: Vec<f64> = values.iter().map(|v| -v).collect();
        let a = simulate(&series(&values), &BandRule::default()).unwrap();
        let b = simulate(&series(&flipped), &BandRule::default()).unwrap();
        for t in 0..300 {
            assert_eq!(a.position[t], -b.position[t]);
        }
        assert_abs_diff_eq!(a.cum_pnl[299], b.cum_pnl[299], epsilon = 1e-12);
    }

    #[test]
    fn rolling_normalization_runs() {
        let rule = BandRule {
            normalization: Normalization::Rolling { window: 3 },
            ..BandRule::default()
        };
        let log = simulate(&series(&[0.0, 1.0, 0.0, 1.0, 0.0]), &rule).unwrap();
        assert_eq!(log.z[0], 0.0);
        assert_abs_diff_eq!(log.z[1], 1.0);
        assert!(log.position.iter().any(|p| *p != 0));
        let bad = BandRule {
            normalization: Normalization::Rolling { window: 1 },
            ..BandRule::default()
        };
        assert!(matches!(simulate(&series(&[0.0, 1.0]), &bad), Err(Error::BadParam(_))));
    }

    #[test]
    fn sharpe_hand_values() {
        let log = log_with_roi(&[0.02, 0.02, 0.04, 0.04]);
        assert_abs_diff_eq!(sharpe(&log, 0, 4).unwrap(), 3.0, epsilon = 1e-12);
        let log = log_with_roi(&[0.01, -0.01, 0.01, -0.01]);
        assert_abs_diff_eq!(sharpe(&log, 0, 4).unwrap(), 0.0, epsilon = 1e-15);
        let log = log_with_roi(&[0.1; 6]);
        assert!(matches!(sharpe(&log, 0, 6), Err(Error::ZeroVariance)));
        assert!(matches!(sharpe(&log, 3, 3), Err(Error::BadWindow { .. })));
        assert!(matches!(sharpe(&log, 0, 7), Err(Error::BadWindow { .. })));
    }

    #[test]
    fn dickey_fuller_hand_value() {
        assert_abs_diff_eq!(dickey_fuller(&[1.0, 0.0, 1.0, 0.0]).unwrap(), -2.0, epsilon = 1e-12);
        assert!(matches!(dickey_fuller(&[1.0, 0.0, 1.0]), Err(Error::SeriesTooShort { .. })));
        assert!(matches!(dickey_fuller(&[0.0; 5]), Err(Error::DegenerateRegression)));
        // exact geometric decay: zero residual
        assert!(matches!(
            dickey_fuller(&[8.0, 4.0, 2.0, 1.0, 0.5]),
            Err(Error::DegenerateRegression)
        ));
    }

    fn ar1(coeff: f64, len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = 0.0;
        (0..len)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                s = coeff * s + e;
                s
            })
            .collect()
    }

    #[test]
    fn dickey_fuller_random_walk_mostly_inside_two() {
        let inside = (0..200)
            .filter(|&seed| {
                let t = dickey_fuller(&ar1(1.0, 2000, seed)).unwrap();
                t > -2.0 && t < 2.0
            })
            .count();
        assert!(inside >= 190, "{inside}/200 inside (-2, 2)");
    }

    #[test]
    fn dickey_fuller_mean_reverting_is_strongly_negative() {
        let below = (0..200)
            .filter(|&seed| dickey_fuller(&ar1(0.2, 2000, 1000 + seed)).unwrap() < -10.0)
            .count();
        assert!(below >= 190, "{below}/200 below -10");
    }

    #[test]
    fn holding_period_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let log = simulate(&series(&values), &BandRule::default()).unwrap();
        let mut open: Option<(usize, i8)> = None;
        for t in 0..log.len() {
            let prev = if t == 0 { 0 } else { log.position[t - 1] };
            let now = log.position[t];
            if prev == 0 && now != 0 {
                open = Some((t, now));
            }
            if prev != 0 && now == 0 {
                let (start, side) = open.take().unwrap();
                let held = cumulative_pnl(&log, start + 1, t + 1).unwrap();
                let expected = f64::from(side) * (values[t] - values[start]);
                assert_abs_diff_eq!(held, expected, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn weight_scaling_invariants(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (rows, cols) = (60, 3);
            let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.5..2.0)).collect();
            let p = prices(rows, cols, &values);
            let w = DVector::from_fn(cols, |_, _| rng.random_range(-1.0..1.0));
            let a = simulate(&spread(&w, &p, 0).unwrap(), &BandRule::default()).unwrap();
            let b = simulate(&spread(&(&w * c), &p, 0).unwrap(), &BandRule::default()).unwrap();
            prop_assert_eq!(&a.position, &b.position);
            for t in 0..rows {
                prop_assert!((b.pnl[t] - c * a.pnl[t]).abs() <= 1e-10 * (1.0 + c * a.pnl[t].abs()));
                prop_assert!((b.roi[t] - a.roi[t]).abs() <= 1e-10);
            }
            if let (Ok(sa), Ok(sb)) = (sharpe(&a, 0, rows), sharpe(&b, 0, rows)) {
                prop_assert!((sa - sb).abs() <= 1e-8 * (1.0 + sa.abs()));
            }
        }

        #[test]
        fn simulate_is_deterministic(values in proptest::collection::vec(-5.0f64..5.0, 2..50)) {
            let s = series(&values);
            prop_assume!(s.mean_sd().1 > 0.0);
            prop_assert_eq!(simulate(&s, &BandRule::default()).unwrap(), simulate(&s, &BandRule::default()).unwrap());
        }
    }
}
