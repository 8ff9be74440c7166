//! Block coordinate descent on `q_ρ(x, y, z)` at a fixed penalty parameter.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::inf_norm;
use crate::model::{qrho_unchecked, ProblemInstance, TriplePoint};
use crate::xstep::{assemble_xstep, solve_xstep, XStepBranch, XStepResult};
use crate::yz::{solve_ystep, solve_zstep, SupportSet};

pub const DEFAULT_XSTEP_TOL: f64 = 1e-12;

/// One pass x → y → z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcdRecord {
    pub iteration: usize,
    /// `q_ρ(x_{l+1}, y_l, z_l)`
    pub q_after_x: f64,
    /// `q_ρ(x_{l+1}, y_{l+1}, z_l)`
    pub q_after_y: f64,
    /// `q_ρ(x_{l+1}, y_{l+1}, z_{l+1})`
    pub q_after_z: f64,
    pub move_x: f64,
    pub move_y: f64,
    pub move_z: f64,
    pub lambda: f64,
    pub active: bool,
    pub branch: XStepBranch,
    /// `max{‖x‖, ‖y‖, ‖z‖}` after the pass.
    pub max_norm: f64,
}

impl BcdRecord {
    pub fn q_rho(&self) -> f64 {
        self.q_after_z
    }

    pub fn max_move(&self) -> f64 {
        self.move_x.max(self.move_y).max(self.move_z)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BcdTrace {
    /// `q_ρ(x_0, y_0, z_0)` when an initial x was supplied.
    pub q_initial: Option<f64>,
    pub records: Vec<BcdRecord>,
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    q_rho: f64,
    move_x: f64,
    move_y: f64,
    move_z: f64,
    lambda: f64,
    active: bool,
}

impl BcdTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn q_values(&self) -> Vec<f64> {
        self.records.iter().map(BcdRecord::q_rho).collect()
    }

    /// Columns `iteration,q_rho,move_x,move_y,move_z,lambda,active`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(TraceRow {
                iteration: r.iteration,
                q_rho: r.q_after_z,
                move_x: r.move_x,
                move_y: r.move_y,
                move_z: r.move_z,
                lambda: r.lambda,
                active: r.active,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdResult {
    pub point: TriplePoint,
    pub trace: BcdTrace,
    pub converged: bool,
    pub iterations: usize,
    /// The x-step that produced `point.x`.
    pub last_xstep: XStepResult,
}

/// `‖new − old‖_∞ / max(‖new‖_∞, 1)`.
pub fn relative_move(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    inf_norm(&(new - old)) / inf_norm(new).max(1.0)
}

/// True iff consecutive `q_ρ` values never rise by more than `tol·(1 + |q|)`.
pub fn check_monotone(trace: &BcdTrace, tol: f64) -> bool {
    let mut prev = trace.q_initial;
    for r in &trace.records {
        let links = [r.q_after_x, r.q_after_y, r.q_after_z];
        for q in links {
            if let Some(p) = prev {
                if q > p + tol * (1.0 + p.abs()) {
                    return false;
                }
            }
            prev = Some(q);
        }
    }
    true
}

/// Runs the x → y → z cycle from `(y0, z0)` until the largest relative block
/// move is at most `eps_inner` or `max_inner` passes have been made.
pub fn bcd_solve(
    inst: &ProblemInstance,
    rho: f64,
    y0: &DVector<f64>,
    z0: &DVector<f64>,
    eps_inner: f64,
    max_inner: usize,
) -> Result<BcdResult> {
    bcd_run(inst, rho, None, y0, z0, eps_inner, max_inner, DEFAULT_XSTEP_TOL)
}

/// As [`bcd_solve`], optionally seeded with the previous x so that the first
/// x-move is measured against it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bcd_run(
    inst: &ProblemInstance,
    rho: f64,
    x0: Option<&DVector<f64>>,
    y0: &DVector<f64>,
    z0: &DVector<f64>,
    eps_inner: f64,
    max_inner: usize,
    xstep_tol: f64,
) -> Result<BcdResult> {
    inst.check_len(y0)?;
    inst.check_len(z0)?;
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::BadParam(format!("rho must be > 0, got {rho}")));
    }
    if !(eps_inner > 0.0) || max_inner == 0 {
        return Err(Error::BadParam(
            "eps_inner must be > 0 and max_inner >= 1".into(),
        ));
    }
    if (y0.norm() - 1.0).abs() > 1e-10 || SupportSet::of(y0).len() > inst.k() {
        return Err(Error::BadParam(format!(
            "y0 must be unit-norm with at most {} nonzeros",
            inst.k()
        )));
    }

    let mut trace = BcdTrace {
        q_initial: x0.map(|x| qrho_unchecked(inst, x, y0, z0, rho)),
        records: Vec::new(),
    };
    let mut x_prev = x0.cloned();
    let mut y = y0.clone();
    let mut z = z0.clone();
    let mut last: Option<XStepResult> = None;
    let mut converged = false;

    for iteration in 1..=max_inner {
        let sys = assemble_xstep(inst, &y, &z, rho)?;
        let xs = solve_xstep(&sys, xstep_tol)?;
        let x = xs.x.clone();
        let q_after_x = qrho_unchecked(inst, &x, &y, &z, rho);

        let y_new = solve_ystep(&x, inst.k())?;
        let q_after_y = qrho_unchecked(inst, &x, &y_new, &z, rho);

        let z_new = solve_zstep(inst, &x, rho)?;
        let q_after_z = qrho_unchecked(inst, &x, &y_new, &z_new, rho);

        let move_x = x_prev.as_ref().map_or(0.0, |p| relative_move(&x, p));
        let move_y = relative_move(&y_new, &y);
        let move_z = relative_move(&z_new, &z);
        let record = BcdRecord {
            iteration,
            q_after_x,
            q_after_y,
            q_after_z,
            move_x,
            move_y,
            move_z,
            lambda: xs.lambda,
            active: xs.active,
            branch: xs.branch,
            max_norm: x.norm().max(y_new.norm()).max(z_new.norm()),
        };
        let stop = record.max_move() <= eps_inner;
        trace.records.push(record);
        x_prev = Some(x);
        y = y_new;
        z = z_new;
        last = Some(xs);
        if stop {
            converged = true;
            break;
        }
    }

    let iterations = trace.records.len();
    Ok(BcdResult {
        point: TriplePoint {
            x: x_prev.expect("at least one pass"),
            y,
            z,
        },
        trace,
        converged,
        iterations,
        last_xstep: last.expect("at least one pass"),
    })
}

/// `max{√(φ/λ_min(A_0)), 1}`: bound on every BCD iterate norm when the start
/// obeys it.
pub fn iterate_norm_bound(inst: &ProblemInstance) -> f64 {
    let lmin = crate::linalg::min_eigenvalue(inst.a0());
    (inst.phi() / lmin).sqrt().max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AutocovSet;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_instance(c: f64) -> ProblemInstance {
        let set = AutocovSet::new(vec![
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, c),
            DMatrix::from_element(1, 1, 0.0),
        ])
        .unwrap();
        ProblemInstance::new(set, 1, 0.0, 1.0, 1).unwrap()
    }

    pub(crate) fn random_instance(n: usize, seed: u64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats: Vec<_> = (0..4)
            .map(|i| {
                let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                let shift = if i == 0 { 0.1 } else { 0.0 };
                &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * shift
            })
            .collect();
        let set = AutocovSet::new(mats).unwrap();
        let lmax = crate::linalg::max_eigenvalue(set.a(0));
        let alpha = (seed % 2) as u8;
        let gamma = if seed.is_multiple_of(3) { 0.0 } else { rng.random_range(0.1..2.0) };
        let phi = rng.random_range(0.05..0.5) * lmax;
        let k = rng.random_range(1..=n);
        ProblemInstance::new(set, alpha.max(u8::from(gamma == 0.0)), gamma, phi, k).unwrap()
    }

    fn unit_sparse_start(inst: &ProblemInstance, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let d = DVector::from_fn(inst.dim(), |_, _| rng.random_range(-1.0..1.0));
        solve_ystep(&d, inst.k()).unwrap()
    }

    #[test]
    fn scalar_instance_agrees_on_sign() {
        for &s in &[1.0, -1.0] {
            let inst = scalar_instance(2.5);
            let y0 = DVector::from_element(1, s);
            let r = bcd_solve(&inst, 3.0, &y0, &y0, 1e-3, 500).unwrap();
            assert!(r.converged);
            assert_abs_diff_eq!(r.point.x[0], s, epsilon = 1e-10);
            assert_abs_diff_eq!(r.point.y[0], s, epsilon = 1e-10);
            assert_abs_diff_eq!(r.point.z[0], s, epsilon = 1e-10);
            assert_abs_diff_eq!(r.trace.records.last().unwrap().q_rho(), 2.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn fixed_point_start_stops_after_one_pass() {
        let inst = scalar_instance(1.0);
        let one = DVector::from_element(1, 1.0);
        let r = bcd_solve(&inst, 1.0, &one, &one, 1e-12, 10).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert!(r.trace.records[0].max_move() <= 1e-12);
    }

    #[test]
    fn fixed_point_of_random_instance() {
        let inst = random_instance(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y0 = unit_sparse_start(&inst, &mut rng);
        let first = bcd_solve(&inst, 2.0, &y0, &y0, 1e-14, 5000).unwrap();
        assert!(first.converged);
        let again = bcd_run(
            &inst,
            2.0,
            Some(&first.point.x),
            &first.point.y,
            &first.point.z,
            1e-8,
            10,
            DEFAULT_XSTEP_TOL,
        )
        .unwrap();
        assert_eq!(again.iterations, 1);
        assert!(again.trace.records[0].max_move() <= 1e-8);
    }

    #[test]
    fn start_must_be_sparse_unit() {
        let inst = random_instance(4, 2);
        let bad = DVector::from_element(4, 1.0);
        assert!(matches!(
            bcd_solve(&inst, 1.0, &bad, &bad, 1e-3, 10),
            Err(Error::BadParam(_))
        ));
    }

    #[test]
    fn monotone_checker_basics() {
        let mk = |qs: &[f64]| BcdTrace {
            q_initial: None,
            records: qs
                .iter()
                .enumerate()
                .map(|(i, &q)| BcdRecord {
                    iteration: i + 1,
                    q_after_x: q,
                    q_after_y: q,
                    q_after_z: q,
                    move_x: 0.0,
                    move_y: 0.0,
                    move_z: 0.0,
                    lambda: 0.0,
                    active: false,
                    branch: XStepBranch::Interior,
                    max_norm: 1.0,
                })
                .collect(),
        };
        assert!(check_monotone(&mk(&[1.0]), 1e-8));
        assert!(check_monotone(&mk(&[3.0, 2.0, 1.0]), 1e-8));
        assert!(!check_monotone(&mk(&[1.0, 1.1]), 1e-8));
    }

    #[test]
    fn trace_is_monotone_and_bounded_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..100 {
            let n = 2 + (seed as usize % 11);
            let inst = random_instance(n, seed);
            let y0 = unit_sparse_start(&inst, &mut rng);
            let rho = rng.random_range(0.5..20.0);
            let r = bcd_solve(&inst, rho, &y0, &y0, 1e-6, 500).unwrap();
            assert!(check_monotone(&r.trace, 1e-8), "seed {seed}");
            let bound = iterate_norm_bound(&inst);
            for rec in &r.trace.records {
                assert!(rec.max_norm <= bound + 1e-8, "seed {seed}: {} > {bound}", rec.max_norm);
                assert!(rec.q_after_x >= rec.q_after_y - 1e-8 * (1.0 + rec.q_after_x.abs()));
                assert!(rec.q_after_y >= rec.q_after_z - 1e-8 * (1.0 + rec.q_after_y.abs()));
            }
            for w in r.trace.records.windows(2) {
                assert!(w[1].q_after_x <= w[0].q_after_z + 1e-8 * (1.0 + w[0].q_after_z.abs()));
            }
        }
    }

    #[test]
    fn plateau_is_block_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 200..220 {
            let inst = random_instance(6, seed);
            let y0 = unit_sparse_start(&inst, &mut rng);
            let rho = 5.0;
            let r = bcd_solve(&inst, rho, &y0, &y0, 1e-13, 20_000).unwrap();
            let qs = r.trace.q_values();
            if qs.len() < 2 || (qs[qs.len() - 1] - qs[qs.len() - 2]).abs() > 1e-12 {
                continue;
            }
            let p = &r.point;
            let q = qrho_unchecked(&inst, &p.x, &p.y, &p.z, rho);
            let sys = assemble_xstep(&inst, &p.y, &p.z, rho).unwrap();
            let bx = solve_xstep(&sys, 1e-12).unwrap().x;
            let by = solve_ystep(&p.x, inst.k()).unwrap();
            let bz = solve_zstep(&inst, &p.x, rho).unwrap();
            let tol = 1e-10 * (1.0 + q.abs());
            assert!(qrho_unchecked(&inst, &bx, &p.y, &p.z, rho) >= q - tol);
            assert!(qrho_unchecked(&inst, &p.x, &by, &p.z, rho) >= q - tol);
            assert!(qrho_unchecked(&inst, &p.x, &p.y, &bz, rho) >= q - tol);
        }
    }

    #[test]
    fn trace_csv_columns() {
        let inst = scalar_instance(2.0);
        let one = DVector::from_element(1, 1.0);
        let r = bcd_solve(&inst, 1.0, &one, &one, 1e-3, 5).unwrap();
        let mut buf = Vec::new();
        r.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,q_rho,move_x,move_y,move_z,lambda,active"
        );
        assert_eq!(lines.count(), r.iterations);
    }
}
