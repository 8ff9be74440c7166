//! Penalty continuation around the BCD inner solver, the feasible-point
//! finder, and a first-order certificate for the final portfolio.

use nalgebra::{DMatrix, DVector, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bcd::{bcd_run, BcdTrace};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, max_eigenvalue, min_eigenvalue, quad_form, sorted_eigen};
use crate::model::{objective_unchecked, qrho_unchecked, ProblemInstance, SolverConfig};
use crate::par::{par_map, Execution};
use crate::xstep::{assemble_xstep, solve_xstep};
use crate::yz::{solve_ystep, top_k_indices, SupportSet};

const POWER_STEPS: usize = 1000;
const POWER_TOL: f64 = 1e-10;
/// Tolerance handed to the certificate of the final portfolio.
pub const KKT_TOL: f64 = 1e-8;
const DESCENT_STEPS: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FeasiblePoint {
    pub x: DVector<f64>,
    pub volatility: f64,
    pub attempts_used: usize,
}

/// `x ← 𝒯_k(A_0x)` from `start` until the ∞-norm step is at most 1e-10 or
/// 1000 steps. Returns the last iterate and the number of steps.
pub fn truncated_power(a0: &DMatrix<f64>, k: usize, start: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let mut x = solve_ystep(start, k)?;
    for step in 1..=POWER_STEPS {
        let next = solve_ystep(&(a0 * &x), k)?;
        let delta = inf_norm(&(&next - &x));
        x = next;
        if delta <= POWER_TOL {
            return Ok((x, step));
        }
    }
    Ok((x, POWER_STEPS))
}

/// Truncated power method from seeded random starts until a stationary point
/// with `xᵀA_0x ≥ φ` turns up.
pub fn find_feasible(
    a0: &DMatrix<f64>,
    k: usize,
    phi: f64,
    max_attempts: usize,
    seed: u64,
) -> Result<FeasiblePoint> {
    let n = a0.nrows();
    if a0.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: a0.ncols(),
        });
    }
    if !(phi > 0.0) || k == 0 || k > n || max_attempts == 0 {
        return Err(Error::BadParam(format!(
            "find_feasible needs phi > 0, 1 <= k <= {n}, attempts >= 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    for attempt in 1..=max_attempts {
        let start = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let (x, _) = truncated_power(a0, k, &start)?;
        let volatility = quad_form(a0, &x);
        if volatility >= phi {
            return Ok(FeasiblePoint {
                x,
                volatility,
                attempts_used: attempt,
            });
        }
        best = best.max(volatility);
    }
    Err(Error::NoFeasiblePoint {
        phi,
        best_volatility: best,
    })
}

/// `(1 + margin)·max{f(x_feas), min_x q_{ρ0}(x, y0, z0)}`, kept strictly
/// positive.
pub fn compute_upsilon(
    inst: &ProblemInstance,
    x_feas: &DVector<f64>,
    rho0: f64,
    y0: &DVector<f64>,
    z0: &DVector<f64>,
    margin: f64,
) -> Result<f64> {
    inst.check_len(x_feas)?;
    if !(margin >= 0.0) {
        return Err(Error::BadParam(format!("margin must be >= 0, got {margin}")));
    }
    let f_feas = objective_unchecked(inst, x_feas);
    let sys = assemble_xstep(inst, y0, z0, rho0)?;
    let q_min = solve_xstep(&sys, crate::bcd::DEFAULT_XSTEP_TOL)?.objective;
    Ok(((1.0 + margin) * f_feas.max(q_min)).max(f64::MIN_POSITIVE))
}

/// `|λ_max(A_0) − α·λ_min(A_1)|`; ρ⁰ must exceed it for indefinite data.
pub fn nonconvex_rho_bound(inst: &ProblemInstance) -> f64 {
    (max_eigenvalue(inst.a0()) - inst.alpha() * min_eigenvalue(inst.a1())).abs()
}

pub fn default_rho0(inst: &ProblemInstance) -> f64 {
    (1.1 * nonconvex_rho_bound(inst)).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `‖r_𝓛‖` of `g − λA_0x + μx` restricted to the support.
    pub stationarity_residual: f64,
    /// `λ·|xᵀA_0x − φ|`.
    pub complementarity_residual: f64,
    /// `|‖x‖ − 1|`.
    pub norm_gap: f64,
    pub support: SupportSet,
    pub lambda: f64,
    pub mu: f64,
    /// Zero on the support.
    pub w: Vec<f64>,
    pub gradient_norm: f64,
    pub volatility: f64,
    pub robinson_ok: bool,
    #[serde(with = "crate::io::nonfinite")]
    pub robinson_condition_number: f64,
}

/// Fits the multipliers of the first-order conditions
/// `(αA_1 + 2γΣ(xᵀA_ix)A_i)x − λA_0x + μx + w = 0`, `w_𝓛 = 0`, at `x`.
pub fn kkt_certify(
    inst: &ProblemInstance,
    x: &DVector<f64>,
    support: &SupportSet,
    tol: f64,
) -> Result<KktReport> {
    inst.check_len(x)?;
    let n = inst.dim();
    if support.indices().iter().any(|&i| i >= n) {
        return Err(Error::BadSupport);
    }
    if (0..n).any(|i| x[i] != 0.0 && !support.contains(i)) {
        return Err(Error::BadSupport);
    }

    let mut g = inst.a1() * x * inst.alpha();
    if inst.gamma() != 0.0 {
        for (a, w) in inst.autocov().higher_lags().iter().zip(inst.lag_forms(x)) {
            g += a * x * (2.0 * inst.gamma() * w);
        }
    }
    let ax = inst.a0() * x;
    let volatility = x.dot(&ax);
    let idx = support.indices();
    let m = idx.len();
    let g_l = DVector::from_iterator(m, idx.iter().map(|&i| g[i]));
    let a_l = DVector::from_iterator(m, idx.iter().map(|&i| ax[i]));
    let x_l = DVector::from_iterator(m, idx.iter().map(|&i| x[i]));

    let inactive = volatility > inst.phi() + tol;
    // g_L = λ·(A_0x)_L − μ·x_L
    let (mut lambda, mut mu) = if inactive {
        (0.0, fit_single(&x_l, &g_l).map_or(0.0, |c| -c))
    } else {
        let mut cols = DMatrix::zeros(m, 2);
        cols.set_column(0, &a_l);
        cols.set_column(1, &(-&x_l));
        let coef = SVD::new(cols, true, true)
            .solve(&g_l, 1e-14)
            .expect("SVD computed with both factors");
        (coef[0], coef[1])
    };
    if lambda < 0.0 {
        lambda = 0.0;
        mu = fit_single(&x_l, &g_l).map_or(0.0, |c| -c);
    }

    let full = &g - &ax * lambda + x * mu;
    let mut w = vec![0.0; n];
    let mut r_l = 0.0;
    for i in 0..n {
        if support.contains(i) {
            r_l += full[i] * full[i];
        } else {
            w[i] = -full[i];
        }
    }

    let (robinson_ok, robinson_condition_number) = if inactive {
        (x_l.norm() > 0.0, 1.0)
    } else {
        robinson(&a_l, &x_l, tol)
    };

    Ok(KktReport {
        stationarity_residual: r_l.sqrt(),
        complementarity_residual: lambda * (volatility - inst.phi()).abs(),
        norm_gap: (x.norm() - 1.0).abs(),
        support: support.clone(),
        lambda,
        mu,
        w,
        gradient_norm: g.norm(),
        volatility,
        robinson_ok,
        robinson_condition_number,
    })
}

/// Least-squares `c` in `c·col ≈ rhs`.
fn fit_single(col: &DVector<f64>, rhs: &DVector<f64>) -> Option<f64> {
    let nn = col.norm_squared();
    (nn > 0.0).then(|| col.dot(rhs) / nn)
}

/// Linear independence of `{(A_0x)_𝓛, x_𝓛}` from the singular values of the
/// unit-normalized columns.
fn robinson(a_l: &DVector<f64>, x_l: &DVector<f64>, tol: f64) -> (bool, f64) {
    let (na, nx) = (a_l.norm(), x_l.norm());
    if na == 0.0 || nx == 0.0 || a_l.len() < 2 {
        return (false, f64::INFINITY);
    }
    let mut cols = DMatrix::zeros(a_l.len(), 2);
    cols.set_column(0, &(a_l / na));
    cols.set_column(1, &(x_l / nx));
    let sv = SVD::new(cols, false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    (smin > tol, cond)
}

/// Moves a unit vector along the sphere, inside its support, until
/// `yᵀA_0y = φ`. Returns `None` when the support cannot reach `φ`.
pub fn restore_volatility(a0: &DMatrix<f64>, y: &DVector<f64>, phi: f64) -> Option<DVector<f64>> {
    let support = SupportSet::of(y);
    let vol = quad_form(a0, y);
    if vol == phi {
        return Some(y.clone());
    }
    let ascend = vol < phi;
    let ay = a0 * y;
    let mut d = -y * vol;
    for &i in support.indices() {
        d[i] += ay[i];
    }
    if let Some(v) = arc_crossing(a0, y, &d, phi, ascend) {
        return Some(v);
    }
    // fall back to the arc towards the extreme eigenvector of the support block
    let idx = support.indices();
    let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| a0[(idx[r], idx[c])]);
    let (_, vecs) = sorted_eigen(&sub);
    let col = if ascend { idx.len() - 1 } else { 0 };
    let mut e = DVector::zeros(y.len());
    for (r, &i) in idx.iter().enumerate() {
        e[i] = vecs[(r, col)];
    }
    if e.dot(y) < 0.0 {
        e = -e;
    }
    let t = &e - y * e.dot(y);
    arc_crossing(a0, y, &t, phi, ascend)
}

/// Searches the great circle through `y` and the tangent `d` for the point
/// closest to `y` with volatility `φ`, moving monotonically towards the
/// extreme of the 2×2 compression.
fn arc_crossing(a0: &DMatrix<f64>, y: &DVector<f64>, d: &DVector<f64>, phi: f64, ascend: bool) -> Option<DVector<f64>> {
    let dn = d.norm();
    if !(dn > 0.0) {
        return None;
    }
    let w = d / dn;
    let m = DMatrix::from_row_slice(
        2,
        2,
        &[
            quad_form(a0, y),
            w.dot(&(a0 * y)),
            w.dot(&(a0 * y)),
            quad_form(a0, &w),
        ],
    );
    let (vals, vecs) = sorted_eigen(&m);
    let col = if ascend { 1 } else { 0 };
    let target = vals[col];
    if (ascend && target < phi) || (!ascend && target > phi) {
        return None;
    }
    let (mut cy, mut cw) = (vecs[(0, col)], vecs[(1, col)]);
    if cy < 0.0 {
        cy = -cy;
        cw = -cw;
    }
    let theta_end = cw.atan2(cy);
    let at = |theta: f64| y * theta.cos() + &w * theta.sin();
    let vol_at = |theta: f64| quad_form(a0, &at(theta));
    let (mut lo, mut hi) = (0.0, theta_end);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = vol_at(mid);
        let before = if ascend { v < phi } else { v > phi };
        if before {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= 1e-16 {
            break;
        }
    }
    // `hi` is on the feasible side of the crossing
    let out = at(hi);
    Some(&out / out.norm())
}

/// `g(x) = (αA_1 + 2γΣ(xᵀA_ix)A_i)x` and its Jacobian.
fn gradient_and_jacobian(inst: &ProblemInstance, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut g = inst.a1() * x * inst.alpha();
    let mut jac = inst.a1() * inst.alpha();
    if inst.gamma() != 0.0 {
        let two_gamma = 2.0 * inst.gamma();
        for a in inst.autocov().higher_lags() {
            let ax = a * x;
            let w = x.dot(&ax);
            g += &ax * (two_gamma * w);
            jac += a * (two_gamma * w) + &ax * ax.transpose() * (2.0 * two_gamma);
        }
    }
    (g, jac)
}

/// Feasible descent for `f` on the unit sphere inside `support`, keeping
/// `xᵀA_0x ≥ φ`. Each step follows the negative tangent gradient, with the
/// component along `A_0x` removed while the constraint binds; a trial point
/// that drops below `φ` is pulled back along the sphere. Armijo backtracking,
/// so `f` never increases. Returns the point and the number of steps taken.
pub fn descend_on_support(
    inst: &ProblemInstance,
    start: &DVector<f64>,
    support: &SupportSet,
    max_steps: usize,
) -> (DVector<f64>, usize) {
    let phi = inst.phi();
    let a0 = inst.a0();
    let mask = |v: DVector<f64>| {
        DVector::from_fn(v.len(), |i, _| if support.contains(i) { v[i] } else { 0.0 })
    };
    let mut x = start.clone();
    let mut f = objective_unchecked(inst, &x);
    let mut t = 1.0;
    let mut steps = 0;
    while steps < max_steps {
        let (g, _) = gradient_and_jacobian(inst, &x);
        let g = mask(g);
        let mut d = -(&g - &x * g.dot(&x));
        let ax = mask(a0 * &x);
        if quad_form(a0, &x) <= phi + KKT_TOL && d.dot(&ax) < 0.0 {
            let u = &ax - &x * ax.dot(&x);
            let uu = u.norm_squared();
            if uu > 0.0 {
                d -= &u * (d.dot(&u) / uu);
            }
        }
        let dd = d.norm_squared();
        if dd.sqrt() <= 1e-12 * (1.0 + g.norm()) {
            break;
        }
        let mut accepted = None;
        while t > 1e-18 {
            let trial = (&x + &d * t).normalize();
            let trial = if quad_form(a0, &trial) < phi {
                restore_volatility(a0, &trial, phi)
            } else {
                Some(trial)
            };
            if let Some(trial) = trial {
                let ft = objective_unchecked(inst, &trial);
                if ft <= f - 1e-4 * t * dd {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, fnext)) = accepted else { break };
        x = next;
        f = fnext;
        t *= 2.0;
        steps += 1;
    }
    (x, steps)
}

/// Newton's method on the first-order system restricted to `support`:
/// `g_𝓛 − λ(A_0x)_𝓛 + μx_𝓛 = 0`, `‖x‖ = 1` and, when `active`,
/// `xᵀA_0x = φ`. Returns the refined point only if it converged to a
/// feasible point with a valid multiplier that is either no worse than
/// `start` or within `max_dist` (∞-norm) of it.
pub fn polish_kkt(
    inst: &ProblemInstance,
    start: &DVector<f64>,
    support: &SupportSet,
    active: bool,
    max_dist: f64,
) -> Option<DVector<f64>> {
    let idx = support.indices();
    let m = idx.len();
    if m == 0 {
        return None;
    }
    let n = inst.dim();
    let a0 = inst.a0();
    let a0_l = DMatrix::from_fn(m, m, |r, c| a0[(idx[r], idx[c])]);
    let embed = |xl: &DVector<f64>| {
        let mut x = DVector::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            x[i] = xl[r];
        }
        x
    };
    let mut xl = DVector::from_iterator(m, idx.iter().map(|&i| start[i]));
    let init = kkt_certify(inst, start, support, KKT_TOL).ok()?;
    let mut mu = init.mu;
    let mut lambda = if active { init.lambda } else { 0.0 };
    let dim = m + 1 + usize::from(active);

    let mut converged = false;
    for _ in 0..50 {
        let x = embed(&xl);
        let (g, jac) = gradient_and_jacobian(inst, &x);
        let a_l = &a0_l * &xl;
        let mut f = DVector::zeros(dim);
        for r in 0..m {
            f[r] = g[idx[r]] - lambda * a_l[r] + mu * xl[r];
        }
        f[m] = 0.5 * (xl.norm_squared() - 1.0);
        if active {
            f[m + 1] = 0.5 * (xl.dot(&a_l) - inst.phi());
        }
        let scale = 1.0 + g.norm() + lambda.abs() + mu.abs();
        if f.norm() <= 1e-13 * scale {
            converged = true;
            break;
        }
        let mut jm = DMatrix::zeros(dim, dim);
        for r in 0..m {
            for c in 0..m {
                jm[(r, c)] = jac[(idx[r], idx[c])] - lambda * a0_l[(r, c)];
            }
            jm[(r, r)] += mu;
            jm[(r, m)] = xl[r];
            jm[(m, r)] = xl[r];
            if active {
                jm[(r, m + 1)] = -a_l[r];
                jm[(m + 1, r)] = a_l[r];
            }
        }
        let step = jm.lu().solve(&f)?;
        for r in 0..m {
            xl[r] -= step[r];
        }
        mu -= step[m];
        if active {
            lambda -= step[m + 1];
        }
        if !xl.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    if !converged {
        return None;
    }
    let x = embed(&xl) / xl.norm();
    let vol = inst.volatility(&x);
    let feasible = if active {
        lambda >= 0.0 && (vol - inst.phi()).abs() <= 1e-10 * inst.phi()
    } else {
        vol >= inst.phi()
    };
    let f0 = objective_unchecked(inst, start);
    let no_worse = objective_unchecked(inst, &x) <= f0 + 1e-9 * (1.0 + f0.abs());
    (feasible && (no_worse || inf_norm(&(&x - start)) <= max_dist)).then_some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxOuterExceeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub rho: f64,
    /// `‖x−y‖_∞ + ‖x−z‖_∞`
    pub gap: f64,
    /// `max{‖x−y‖, ‖x−z‖}`
    pub gap_two_norm: f64,
    /// `√(Υ/ρ)`
    pub gap_bound: f64,
    pub q_rho: f64,
    /// Whether this pass started from the feasible point after the safeguard.
    pub reset: bool,
    pub inner_iterations: usize,
    pub inner_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Final y, moved onto the volatility boundary when that was needed.
    pub portfolio: DVector<f64>,
    pub raw_x: DVector<f64>,
    pub raw_y: DVector<f64>,
    pub raw_z: DVector<f64>,
    pub restored: bool,
    pub polished: bool,
    /// Accepted steps of the support-restricted descent before polishing.
    pub descent_steps: usize,
    /// 0 for the run from the feasible point.
    pub start_index: usize,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub rho0: f64,
    pub rho_final: f64,
    pub upsilon: f64,
    pub objective: f64,
    pub volatility: f64,
    pub kkt: KktReport,
    pub feasible: FeasiblePoint,
    pub outer_trace: Vec<OuterRecord>,
    pub inner_traces: Vec<BcdTrace>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Checks the configuration against the instance and returns `ρ⁰`.
fn prepare(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<f64> {
    cfg.validate()?;
    if !inst.autocov().lags_psd() && !cfg.nonconvex {
        return Err(Error::BadParam(
            "lag matrices are indefinite; enable nonconvex mode with a large enough rho0".into(),
        ));
    }
    let rho0 = cfg.rho0.unwrap_or_else(|| default_rho0(inst));
    if cfg.nonconvex {
        let bound = nonconvex_rho_bound(inst);
        if rho0 <= bound {
            return Err(Error::RhoBelowBound { rho0, bound });
        }
    }
    Ok(rho0)
}

/// Penalty continuation from the feasible point: BCD at `ρ⁽ʲ⁾`, grow `ρ` by
/// `r`, restart from the feasible point whenever the next x-step minimum
/// exceeds `Υ`.
pub fn ppc_solve(inst: &ProblemInstance, cfg: &SolverConfig, seed: u64) -> Result<SolveReport> {
    let rho0 = prepare(inst, cfg)?;
    let feasible = find_feasible(inst.a0(), inst.k(), inst.phi(), cfg.feasible_attempts, seed)?;
    let start = feasible.x.clone();
    let mut best = ppc_run(inst, cfg, rho0, feasible.clone(), &start, &start)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ START_STREAM);
    for index in 1..cfg.starts {
        let d = DVector::from_fn(inst.dim(), |_, _| StandardNormal.sample(&mut rng));
        let y0 = solve_ystep(&d, inst.k())?;
        let mut run = ppc_run(inst, cfg, rho0, feasible.clone(), &y0, &y0)?;
        run.start_index = index;
        if better(&run, &best) {
            best = run;
        }
    }
    Ok(best)
}

const START_STREAM: u64 = 0x7374_6172_7473;

fn better(a: &SolveReport, b: &SolveReport) -> bool {
    match (a.converged(), b.converged()) {
        (true, false) => true,
        (false, true) => false,
        _ => a.objective < b.objective,
    }
}

/// [`ppc_solve`] from a caller-chosen `(y0, z0)` with `y0 ∈ 𝒴`, `‖z0‖ ≤ 1`.
pub fn ppc_solve_from(
    inst: &ProblemInstance,
    cfg: &SolverConfig,
    seed: u64,
    y0: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<SolveReport> {
    let rho0 = prepare(inst, cfg)?;
    inst.check_len(y0)?;
    inst.check_len(z0)?;
    if z0.norm() > 1.0 + 1e-12 {
        return Err(Error::BadParam("z0 must satisfy ||z0|| <= 1".into()));
    }
    let feasible = find_feasible(inst.a0(), inst.k(), inst.phi(), cfg.feasible_attempts, seed)?;
    ppc_run(inst, cfg, rho0, feasible, y0, z0)
}

fn ppc_run(
    inst: &ProblemInstance,
    cfg: &SolverConfig,
    rho0: f64,
    feasible: FeasiblePoint,
    y0: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<SolveReport> {
    let x_feas = feasible.x.clone();
    let upsilon = compute_upsilon(inst, &x_feas, rho0, y0, z0, cfg.upsilon_margin)?;

    let mut rho = rho0;
    let mut y = y0.clone();
    let mut z = z0.clone();
    let mut x_prev: Option<DVector<f64>> = None;
    let mut reset = false;
    let mut outer_trace = Vec::new();
    let mut inner_traces = Vec::new();
    let mut status = SolveStatus::MaxOuterExceeded;
    let mut last = None;

    for outer in 1..=cfg.max_outer {
        let res = bcd_run(
            inst,
            rho,
            x_prev.as_ref(),
            &y,
            &z,
            cfg.eps_inner,
            cfg.max_inner,
            cfg.bisect_tol,
        )?;
        let p = &res.point;
        let dy = &p.x - &p.y;
        let dz = &p.x - &p.z;
        let gap = inf_norm(&dy) + inf_norm(&dz);
        outer_trace.push(OuterRecord {
            outer,
            rho,
            gap,
            gap_two_norm: dy.norm().max(dz.norm()),
            gap_bound: (upsilon / rho).sqrt(),
            q_rho: qrho_unchecked(inst, &p.x, &p.y, &p.z, rho),
            reset,
            inner_iterations: res.iterations,
            inner_converged: res.converged,
        });
        inner_traces.push(res.trace.clone());
        x_prev = Some(p.x.clone());
        y = p.y.clone();
        z = p.z.clone();
        let done = gap <= cfg.eps_outer;
        last = Some(res);
        if done {
            status = SolveStatus::Converged;
            break;
        }
        if outer == cfg.max_outer {
            break;
        }
        rho *= cfg.growth_r;
        let probe = solve_xstep(&assemble_xstep(inst, &y, &z, rho)?, cfg.bisect_tol)?;
        reset = probe.objective > upsilon;
        if reset {
            y = x_feas.clone();
            z = x_feas.clone();
        }
    }

    let last = last.expect("max_outer >= 1");
    let raw = last.point;
    let support = top_k_indices(&raw.x, inst.k());
    let active = inst.volatility(&raw.y) < inst.phi() || last.last_xstep.active;
    let (mut portfolio, restored) = if active {
        match restore_volatility(inst.a0(), &raw.y, inst.phi()) {
            Some(v) => (v, true),
            None => (raw.y.clone(), false),
        }
    } else {
        (raw.y.clone(), false)
    };
    let mut polished = false;
    let mut descent_steps = 0;
    if cfg.polish {
        let (v, steps) = descend_on_support(inst, &portfolio, &support, DESCENT_STEPS);
        portfolio = v;
        descent_steps = steps;
        let active = inst.volatility(&portfolio) <= inst.phi() + KKT_TOL;
        if let Some(v) = polish_kkt(inst, &portfolio, &support, active, 10.0 * cfg.eps_outer) {
            portfolio = v;
            polished = true;
        }
    }
    let kkt = kkt_certify(inst, &portfolio, &support, KKT_TOL)?;
    Ok(SolveReport {
        objective: objective_unchecked(inst, &portfolio),
        volatility: inst.volatility(&portfolio),
        portfolio,
        raw_x: raw.x,
        raw_y: raw.y,
        raw_z: raw.z,
        restored,
        polished,
        descent_steps,
        start_index: 0,
        status,
        outer_iterations: outer_trace.len(),
        rho0,
        rho_final: rho,
        upsilon,
        kkt,
        feasible,
        outer_trace,
        inner_traces,
    })
}

/// Solves independent instances, one seed each, in input order.
pub fn solve_batch(
    jobs: &[(ProblemInstance, u64)],
    cfg: &SolverConfig,
    exec: Execution,
) -> Vec<Result<SolveReport>> {
    par_map(exec, jobs, |(inst, seed)| ppc_solve(inst, cfg, *seed))
}
