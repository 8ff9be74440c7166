//! Quick built-in oracle checks, run by `sparse-meanrev selftest`.
//!
//! Each check compares a solver component with an independent brute-force or
//! hand-derived answer on a few seeded cases. The full suites live in the test
//! targets; this is a smoke test for an installed binary.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backtest::{dickey_fuller, sharpe, simulate, BandRule, Normalization, SpreadSeries};
use crate::bcd::{bcd_solve, check_monotone, iterate_norm_bound};
use crate::estimation::{build_autocov_set_default, synth_var1};
use crate::model::{build_instance, ProxyKind, SolverConfig};
use crate::ppc::ppc_solve;
use crate::xstep::{solve_xstep, XStepSystem};
use crate::yz::solve_ystep;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: Result<String, String>) -> Check {
    match outcome {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

pub fn run() -> Vec<Check> {
    vec![
        check("xstep_polar_grid", xstep_polar_grid()),
        check("ystep_exhaustive", ystep_exhaustive()),
        check("bcd_monotone", bcd_monotone()),
        check("ppc_kkt", ppc_kkt()),
        check("backtest_fixtures", backtest_fixtures()),
    ]
}

/// Minimum of `xᵀHx − 2bᵀx` over `xᵀA₀x ≥ φ` in the plane, exact along each
/// ray and scanned over angles. `H` must be positive definite.
fn polar_min(h: &DMatrix<f64>, b: &DVector<f64>, a0: &DMatrix<f64>, phi: f64) -> f64 {
    let steps = 20_000;
    (0..steps)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / steps as f64;
            let d = DVector::from_vec(vec![t.cos(), t.sin()]);
            let hd = (d.transpose() * h * &d)[0];
            let bd = b.dot(&d);
            let r_min = (phi / (d.transpose() * a0 * &d)[0]).sqrt();
            let r = (bd / hd).max(r_min);
            r * r * hd - 2.0 * r * bd
        })
        .fold(f64::INFINITY, f64::min)
}

fn spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * shift
}

fn xstep_polar_grid() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for case in 0..20 {
        let h = spd(&mut rng, 2, 0.1);
        let a0 = spd(&mut rng, 2, 0.1);
        let b = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        let phi = rng.random_range(0.1..3.0);
        let sys = XStepSystem::new(h.clone(), b.clone(), a0.clone(), phi).map_err(|e| e.to_string())?;
        let got = solve_xstep(&sys, 1e-12).map_err(|e| e.to_string())?.objective;
        let want = polar_min(&h, &b, &a0, phi);
        let rel = (got - want) / want.abs().max(1.0);
        if rel > 1e-6 {
            return Err(format!("case {case}: solver {got:.9e} vs grid {want:.9e}"));
        }
        worst = worst.max(rel.abs());
    }
    Ok(format!("20 systems, worst relative gap {worst:.1e}"))
}

fn ystep_exhaustive() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..50 {
        let n = 6;
        let k = 1 + case % 5;
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let y = solve_ystep(&x, k).map_err(|e| e.to_string())?;
        // over unit vectors on a support S the best distance is 2 − 2‖x_S‖
        let best = (0u32..1 << n)
            .filter(|m| m.count_ones() as usize == k)
            .map(|m| {
                let norm: f64 = (0..n).filter(|i| m & (1 << i) != 0).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
                x.norm_squared() + 1.0 - 2.0 * norm
            })
            .fold(f64::INFINITY, f64::min);
        let got = (&x - &y).norm_squared();
        if got > best + 1e-12 {
            return Err(format!("case {case}: {got} > {best}"));
        }
    }
    Ok("50 vectors".into())
}

fn instance(seed: u64, n: usize, proxy: ProxyKind) -> Result<crate::model::ProblemInstance, String> {
    let series = synth_var1(n, 300, 0.8, 1.0, seed).map_err(|e| e.to_string())?;
    let set = build_autocov_set_default(&series, 3).map_err(|e| e.to_string())?;
    let mut diag: Vec<f64> = set.a(0).diagonal().iter().copied().collect();
    diag.sort_by(f64::total_cmp);
    let phi = 0.3 * diag[n / 2];
    build_instance(set, proxy, 0.5, phi, 2.min(n)).map_err(|e| e.to_string())
}

fn bcd_monotone() -> Result<String, String> {
    for seed in 0..10 {
        let inst = instance(seed, 5, ProxyKind::ALL[seed as usize % 3])?;
        let start = DVector::from_fn(5, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let res = bcd_solve(&inst, 5.0, &start, &start, 1e-6, 200).map_err(|e| e.to_string())?;
        if !check_monotone(&res.trace, 1e-8) {
            return Err(format!("seed {seed}: q_rho increased"));
        }
        let bound = iterate_norm_bound(&inst) + 1e-8;
        if res.trace.records.iter().any(|r| r.max_norm > bound) {
            return Err(format!("seed {seed}: iterate norm above {bound}"));
        }
    }
    Ok("10 runs".into())
}

fn ppc_kkt() -> Result<String, String> {
    let cfg = SolverConfig::default();
    let mut certified = 0;
    for seed in 0..6 {
        let inst = instance(100 + seed, 6, ProxyKind::ALL[seed as usize % 3])?;
        let rep = ppc_solve(&inst, &cfg, seed).map_err(|e| e.to_string())?;
        if !rep.converged() || !rep.kkt.robinson_ok {
            continue;
        }
        let tol = 10.0 * cfg.eps_outer * (1.0 + rep.kkt.gradient_norm);
        if rep.kkt.stationarity_residual > tol || rep.kkt.complementarity_residual > 1e-6 {
            return Err(format!(
                "seed {seed}: stationarity {:.2e} (tol {tol:.2e}), complementarity {:.2e}",
                rep.kkt.stationarity_residual, rep.kkt.complementarity_residual
            ));
        }
        certified += 1;
    }
    Ok(format!("{certified}/6 solves certified"))
}

fn backtest_fixtures() -> Result<String, String> {
    let rule = BandRule {
        normalization: Normalization::Fixed { mean: 0.0, sd: 1.0 },
        ..BandRule::default()
    };
    let s = SpreadSeries::new(vec![0.0, 2.0, 0.0], 1.0).map_err(|e| e.to_string())?;
    let log = simulate(&s, &rule).map_err(|e| e.to_string())?;
    if log.cum_pnl[2] != 2.0 {
        return Err(format!("round trip P&L {}", log.cum_pnl[2]));
    }
    let df = dickey_fuller(&[1.0, 0.0, 1.0, 0.0]).map_err(|e| e.to_string())?;
    if (df + 2.0).abs() > 1e-12 {
        return Err(format!("DF statistic {df}"));
    }
    let mut roi_log = log.clone();
    roi_log.roi = vec![0.02, 0.02, 0.04, 0.04];
    roi_log.pnl = roi_log.roi.clone();
    roi_log.spread = vec![0.0; 4];
    let sr = sharpe(&roi_log, 0, 4).map_err(|e| e.to_string())?;
    if (sr - 3.0).abs() > 1e-12 {
        return Err(format!("Sharpe {sr}"));
    }
    Ok("P&L 2, DF -2, Sharpe 3".into())
}
