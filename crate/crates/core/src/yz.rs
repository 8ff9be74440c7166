//! Closed-form y- and z-steps.

use std::collections::BTreeSet;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProblemInstance;

/// Retained indices of a sparsified vector (0-based, ascending).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    indices: Vec<usize>,
}

impl SupportSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        Self {
            indices: set.into_iter().collect(),
        }
    }

    /// Indices of the nonzero entries of `x`.
    pub fn of(x: &DVector<f64>) -> Self {
        Self {
            indices: (0..x.len()).filter(|&i| x[i] != 0.0).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }
}

/// Indices of the `k` largest `|x_i|`, lowest index first among ties.
pub fn top_k_indices(x: &DVector<f64>, k: usize) -> SupportSet {
    let mut order: Vec<usize> = (0..x.len()).collect();
    // stable sort keeps ascending index order within equal magnitudes
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()));
    order.truncate(k);
    SupportSet::new(order)
}

/// `𝒯_k(x)`: keep the `k` largest-magnitude entries and normalize.
pub fn sparsify_top_k(x: &DVector<f64>, k: usize) -> Result<(DVector<f64>, SupportSet)> {
    if k == 0 || k > x.len() {
        return Err(Error::BadParam(format!(
            "k must be in [1, {}], got {k}",
            x.len()
        )));
    }
    let support = top_k_indices(x, k);
    let mut y = DVector::zeros(x.len());
    for &i in support.indices() {
        y[i] = x[i];
    }
    let norm = y.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    y /= norm;
    Ok((y, support))
}

pub fn solve_ystep(x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    sparsify_top_k(x, k).map(|(y, _)| y)
}

/// `z = ρ(γΣ(xᵀA_ix)A_i + ρI)⁻¹x`.
pub fn solve_zstep(inst: &ProblemInstance, x: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
    inst.check_len(x)?;
    if !(rho > 0.0) {
        return Err(Error::BadParam(format!("rho must be > 0, got {rho}")));
    }
    if inst.gamma() == 0.0 {
        return Ok(x.clone());
    }
    let m = zstep_matrix(inst, x, rho);
    let chol = Cholesky::new(m).ok_or(Error::ZStepIndefinite)?;
    Ok(chol.solve(&(x * rho)))
}

pub(crate) fn zstep_matrix(inst: &ProblemInstance, x: &DVector<f64>, rho: f64) -> DMatrix<f64> {
    let n = inst.dim();
    let mut m = DMatrix::identity(n, n) * rho;
    for (a, w) in inst.autocov().higher_lags().iter().zip(inst.lag_forms(x)) {
        if w != 0.0 {
            m += a * (inst.gamma() * w);
        }
    }
    crate::linalg::symmetric_part(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{qrho_unchecked, AutocovSet};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        loop {
            let d = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            if d.norm() > 1e-3 {
                return d.normalize();
            }
        }
    }

    fn random_instance(n: usize, gamma: f64, seed: u64) -> ProblemInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats: Vec<_> = (0..4)
            .map(|i| {
                let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
                &b * b.transpose() + DMatrix::identity(n, n) * if i == 0 { 0.5 } else { 0.0 }
            })
            .collect();
        ProblemInstance::new(AutocovSet::new(mats).unwrap(), 1, gamma, 0.3, n.min(2)).unwrap()
    }

    fn supports(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize == k {
                out.push((0..n).filter(|i| mask & (1 << i) != 0).collect());
            }
        }
        out
    }

    #[test]
    fn sparsify_hand_value() {
        let (y, s) = sparsify_top_k(&v(&[3.0, -4.0, 1.0]), 2).unwrap();
        assert_abs_diff_eq!(y[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], -0.8, epsilon = 1e-15);
        assert_eq!(y[2], 0.0);
        assert_eq!(s.indices(), &[0, 1]);
    }

    #[test]
    fn sparsify_full_support_normalizes() {
        let x = v(&[1.0, 2.0, -2.0]);
        let (y, _) = sparsify_top_k(&x, 3).unwrap();
        assert!((y - x / 3.0).norm() < 1e-15);
    }

    #[test]
    fn ties_keep_lowest_index() {
        let (y, s) = sparsify_top_k(&v(&[1.0, 1.0]), 1).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.indices(), &[0]);
        let (_, s) = sparsify_top_k(&v(&[0.5, -2.0, 2.0, 2.0]), 2).unwrap();
        assert_eq!(s.indices(), &[1, 2]);
    }

    #[test]
    fn zero_vector_rejected() {
        assert!(matches!(sparsify_top_k(&v(&[0.0, 0.0]), 1), Err(Error::ZeroVector)));
        assert!(matches!(sparsify_top_k(&v(&[1.0]), 2), Err(Error::BadParam(_))));
    }

    #[test]
    fn ystep_fixed_point() {
        let x = v(&[0.0, 0.6, 0.0, -0.8]);
        assert_eq!(solve_ystep(&x, 2).unwrap(), x);
    }

    #[test]
    fn ystep_beats_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..4 {
            let n = 3 + trial % 3;
            let k = 1 + trial % (n - 1);
            let x = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let y = solve_ystep(&x, k).unwrap();
            let best = (&x - &y).norm_squared();
            for s in supports(n, k) {
                for _ in 0..10_000 {
                    let mut w = DVector::zeros(n);
                    for &i in &s {
                        w[i] = rng.random_range(-1.0..1.0);
                    }
                    if w.norm() == 0.0 {
                        continue;
                    }
                    let w = w.normalize();
                    assert!(best <= (&x - w).norm_squared() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn zstep_gamma_zero_is_identity() {
        let inst = random_instance(3, 0.0, 1);
        let x = v(&[0.3, -0.2, 0.9]);
        assert_eq!(solve_zstep(&inst, &x, 2.0).unwrap(), x);
    }

    #[test]
    fn zstep_hand_value() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let set = AutocovSet::new(vec![one.clone(), one, DMatrix::from_element(1, 1, 2.0)]).unwrap();
        let inst = ProblemInstance::new(set, 1, 1.0, 0.5, 1).unwrap();
        let z = solve_zstep(&inst, &v(&[1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(z[0], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn zstep_large_rho_approaches_x() {
        let inst = random_instance(4, 1.0, 5);
        let scale = inst
            .autocov()
            .matrices()
            .iter()
            .map(|m| m.norm())
            .fold(0.0, f64::max);
        let x = v(&[0.5, -1.0, 0.25, 2.0]);
        let z = solve_zstep(&inst, &x, 1e6 * scale).unwrap();
        assert!((&z - &x).norm() <= 1e-4 * x.norm());
    }

    #[test]
    fn zstep_dimension_checked() {
        let inst = random_instance(3, 1.0, 2);
        assert!(matches!(
            solve_zstep(&inst, &v(&[1.0, 2.0]), 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ystep_block_optimality_in_qrho() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let inst = random_instance(4, 0.5, 8);
        let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let z = random_unit(4, &mut rng);
        let y = solve_ystep(&x, inst.k()).unwrap();
        let best = qrho_unchecked(&inst, &x, &y, &z, 3.0);
        for _ in 0..10_000 {
            let w = solve_ystep(&random_unit(4, &mut rng), inst.k()).unwrap();
            assert!(best <= qrho_unchecked(&inst, &x, &w, &z, 3.0) + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn zstep_shrinks_and_solves(seed in 0u64..5000, rho in 0.01f64..100.0, gamma in 0.0f64..10.0) {
            let inst = random_instance(4, gamma, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let x = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let z = solve_zstep(&inst, &x, rho).unwrap();
            prop_assert!(z.norm() <= x.norm() * (1.0 + 1e-12));
            let resid = (zstep_matrix(&inst, &x, rho) * &z - &x * rho).norm();
            prop_assert!(resid <= 1e-10 * rho * x.norm().max(1e-300));
        }

        #[test]
        fn ystep_sign_equivariant(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..8),
            c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
            kf in 0.0f64..1.0,
        ) {
            let x = DVector::from_vec(xs);
            prop_assume!(x.amax() > 1e-6);
            let k = 1 + ((x.len() - 1) as f64 * kf) as usize;
            let y = solve_ystep(&x, k).unwrap();
            let yc = solve_ystep(&(&x * c), k).unwrap();
            prop_assert!((yc - y * c.signum()).norm() <= 1e-12);
        }

        #[test]
        fn ystep_lands_in_feasible_set(xs in proptest::collection::vec(-5.0f64..5.0, 1..10), kf in 0.0f64..1.0) {
            let x = DVector::from_vec(xs);
            prop_assume!(x.amax() > 1e-6);
            let k = 1 + ((x.len() - 1) as f64 * kf) as usize;
            let (y, s) = sparsify_top_k(&x, k).unwrap();
            prop_assert!((y.norm() - 1.0).abs() < 1e-12);
            prop_assert!(s.len() == k);
            prop_assert!(SupportSet::of(&y).len() <= k);
        }
    }
}
