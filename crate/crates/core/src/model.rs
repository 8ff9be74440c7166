//! Problem data: the autocovariance matrices, the proxy-to-weight mapping and
//! the objective / penalty function evaluations.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, quad_form, relative_asymmetry, sym_norm};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Autocovariance matrices `A_0..A_q` of a multivariate series.
///
/// `A_0` is positive definite. The lag matrices `A_1..A_q` are positive
/// semidefinite unless the set was built with [`AutocovSet::new_indefinite`],
/// which only the nonconvex solver mode accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocovSet {
    matrices: Vec<DMatrix<f64>>,
    lags_psd: bool,
}

impl AutocovSet {
    pub fn new(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::validate(&matrices, true)?;
        Ok(Self {
            matrices,
            lags_psd: true,
        })
    }

    /// Accepts symmetric lag matrices of any inertia. `A_0` must still be
    /// positive definite.
    pub fn new_indefinite(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::validate(&matrices, false)?;
        let lags_psd = matrices[1..]
            .iter()
            .all(|m| min_eigenvalue(m) >= -PSD_TOL * sym_norm(m));
        Ok(Self { matrices, lags_psd })
    }

    fn validate(matrices: &[DMatrix<f64>], require_psd: bool) -> Result<()> {
        if matrices.len() < 3 {
            return Err(Error::NonPsdInput(format!(
                "need A_0..A_q with q >= 2, got {} matrices",
                matrices.len()
            )));
        }
        let n = matrices[0].nrows();
        if n == 0 {
            return Err(Error::NonPsdInput("empty matrices".into()));
        }
        for (i, m) in matrices.iter().enumerate() {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::NonPsdInput(format!(
                    "A_{i} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonPsdInput(format!("A_{i} has non-finite entries")));
            }
            let asym = relative_asymmetry(m);
            if asym > SYMMETRY_TOL {
                return Err(Error::NonPsdInput(format!(
                    "A_{i} is not symmetric (relative asymmetry {asym:.3e})"
                )));
            }
        }
        let lmin0 = min_eigenvalue(&matrices[0]);
        if lmin0 <= 0.0 {
            return Err(Error::NonPsdInput(format!(
                "A_0 is not positive definite (smallest eigenvalue {lmin0:.3e})"
            )));
        }
        if require_psd {
            for (i, m) in matrices.iter().enumerate().skip(1) {
                let lmin = min_eigenvalue(m);
                if lmin < -PSD_TOL * sym_norm(m) {
                    return Err(Error::NonPsdInput(format!(
                        "A_{i} is not positive semidefinite (smallest eigenvalue {lmin:.3e})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.matrices[0].nrows()
    }

    /// The largest lag `q`.
    pub fn lag_count(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn a(&self, i: usize) -> &DMatrix<f64> {
        &self.matrices[i]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    /// Lag matrices `A_2..A_q` entering the portmanteau term.
    pub fn higher_lags(&self) -> &[DMatrix<f64>] {
        &self.matrices[2..]
    }

    pub fn lags_psd(&self) -> bool {
        self.lags_psd
    }

    /// A copy keeping only `A_0..A_q`.
    pub fn truncated(&self, q: usize) -> Result<Self> {
        if q < 2 || q > self.lag_count() {
            return Err(Error::BadParam(format!(
                "cannot truncate a set with q = {} to q = {q}",
                self.lag_count()
            )));
        }
        Ok(Self {
            matrices: self.matrices[..=q].to_vec(),
            lags_psd: self.lags_psd,
        })
    }
}

/// Which mean-reversion proxy problem (P) encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Predictability,
    Portmanteau,
    CrossingStats,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 3] = [
        ProxyKind::Predictability,
        ProxyKind::Portmanteau,
        ProxyKind::CrossingStats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProxyKind::Predictability => "predictability",
            ProxyKind::Portmanteau => "portmanteau",
            ProxyKind::CrossingStats => "crossing_stats",
        }
    }
}

impl fmt::Display for ProxyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProxyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predictability" => Ok(ProxyKind::Predictability),
            "portmanteau" => Ok(ProxyKind::Portmanteau),
            "crossing_stats" | "crossing" => Ok(ProxyKind::CrossingStats),
            other => Err(Error::BadParam(format!("unknown proxy '{other}'"))),
        }
    }
}

/// One instance of problem (P):
/// minimize `α·xᵀA_1x + γ·Σ_{i≥2}(xᵀA_ix)²` subject to `xᵀA_0x ≥ φ`, `‖x‖ = 1`,
/// `‖x‖_0 ≤ k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    autocov: AutocovSet,
    alpha: u8,
    gamma: f64,
    phi: f64,
    k: usize,
}

impl ProblemInstance {
    /// Builds an instance from raw weights. Most callers want [`build_instance`].
    pub fn new(autocov: AutocovSet, alpha: u8, gamma: f64, phi: f64, k: usize) -> Result<Self> {
        if alpha > 1 {
            return Err(Error::BadParam(format!("alpha must be 0 or 1, got {alpha}")));
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::BadParam(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::BadParam(format!("phi must be > 0, got {phi}")));
        }
        let n = autocov.dim();
        if k == 0 || k > n {
            return Err(Error::BadParam(format!("k must lie in [1, {n}], got {k}")));
        }
        Ok(Self {
            autocov,
            alpha,
            gamma,
            phi,
            k,
        })
    }

    pub fn autocov(&self) -> &AutocovSet {
        &self.autocov
    }

    pub fn dim(&self) -> usize {
        self.autocov.dim()
    }

    pub fn alpha(&self) -> f64 {
        f64::from(self.alpha)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn a0(&self) -> &DMatrix<f64> {
        self.autocov.a(0)
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        self.autocov.a(1)
    }

    pub(crate) fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(())
    }

    /// `xᵀA_ix` for `i = 2..q`.
    pub fn lag_forms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.autocov
            .higher_lags()
            .iter()
            .map(|a| quad_form(a, x))
            .collect()
    }

    pub fn volatility(&self, x: &DVector<f64>) -> f64 {
        quad_form(self.a0(), x)
    }
}

/// Maps a proxy onto `(α, γ)`:
/// predictability → (1, 0), portmanteau → (0, 1), crossing statistics → (1, γ).
pub fn build_instance(
    autocov: AutocovSet,
    proxy: ProxyKind,
    gamma: f64,
    phi: f64,
    k: usize,
) -> Result<ProblemInstance> {
    let (alpha, gamma_eff) = match proxy {
        ProxyKind::Predictability => (1, 0.0),
        ProxyKind::Portmanteau => (0, 1.0),
        ProxyKind::CrossingStats => (1, gamma),
    };
    if proxy != ProxyKind::CrossingStats && gamma != 0.0 && gamma != gamma_eff {
        log::warn!("gamma = {gamma} is ignored for the {proxy} proxy");
    }
    ProblemInstance::new(autocov, alpha, gamma_eff, phi, k)
}

/// `f(x) = α·xᵀA_1x + γ·Σ_{i=2}^{q}(xᵀA_ix)²`.
pub fn eval_objective(inst: &ProblemInstance, x: &DVector<f64>) -> Result<f64> {
    inst.check_len(x)?;
    Ok(objective_unchecked(inst, x))
}

pub(crate) fn objective_unchecked(inst: &ProblemInstance, x: &DVector<f64>) -> f64 {
    let mut value = 0.0;
    if inst.alpha != 0 {
        value += quad_form(inst.a1(), x);
    }
    if inst.gamma != 0.0 {
        value += inst.gamma * inst.lag_forms(x).iter().map(|v| v * v).sum::<f64>();
    }
    value
}

/// A point of the split problem: `x` carries the volatility constraint, `y` the
/// sphere and cardinality constraints, `z` the second factor of the quartic term.
#[derive(Debug, Clone, PartialEq)]
pub struct TriplePoint {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
}

impl TriplePoint {
    pub fn new(x: DVector<f64>, y: DVector<f64>, z: DVector<f64>) -> Self {
        Self { x, y, z }
    }

    pub fn diagonal(x: DVector<f64>) -> Self {
        Self {
            y: x.clone(),
            z: x.clone(),
            x,
        }
    }
}

/// Penalty function
/// `q_ρ(x,y,z) = α·xᵀA_1x + γ·Σ(zᵀA_iz)(xᵀA_ix) + ρ(‖x−y‖² + ‖x−z‖²)`.
pub fn eval_qrho(inst: &ProblemInstance, p: &TriplePoint, rho: f64) -> Result<f64> {
    inst.check_len(&p.x)?;
    inst.check_len(&p.y)?;
    inst.check_len(&p.z)?;
    if !(rho > 0.0) {
        return Err(Error::BadParam(format!("rho must be > 0, got {rho}")));
    }
    Ok(qrho_unchecked(inst, &p.x, &p.y, &p.z, rho))
}

pub(crate) fn qrho_unchecked(
    inst: &ProblemInstance,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
) -> f64 {
    let mut value = 0.0;
    if inst.alpha != 0 {
        value += quad_form(inst.a1(), x);
    }
    if inst.gamma != 0.0 {
        let cross: f64 = inst
            .autocov
            .higher_lags()
            .iter()
            .map(|a| quad_form(a, z) * quad_form(a, x))
            .sum();
        value += inst.gamma * cross;
    }
    value + rho * ((x - y).norm_squared() + (x - z).norm_squared())
}

/// Tuning knobs of the penalty decomposition solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Initial penalty; `None` selects `max(1, 1.1·|λ_max(A_0) − α·λ_min(A_1)|)`.
    pub rho0: Option<f64>,
    pub growth_r: f64,
    pub eps_inner: f64,
    pub eps_outer: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub bisect_tol: f64,
    pub upsilon_margin: f64,
    /// Enforce the penalty bound required for indefinite lag matrices.
    pub nonconvex: bool,
    pub feasible_attempts: usize,
    /// Refine the final portfolio by Newton steps on the first-order system
    /// over its support. The unrefined y is still reported.
    pub polish: bool,
    /// Number of penalty runs; the first starts at the feasible point, the
    /// rest at seeded random sparse unit vectors. The best converged run wins.
    pub starts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho0: None,
            growth_r: 10f64.sqrt(),
            eps_inner: 1e-3,
            eps_outer: 1e-3,
            max_inner: 500,
            max_outer: 60,
            bisect_tol: 1e-12,
            upsilon_margin: 0.0,
            nonconvex: false,
            feasible_attempts: 100,
            polish: true,
            starts: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(rho0) = self.rho0 {
            if !(rho0 > 0.0) || !rho0.is_finite() {
                return Err(Error::BadParam(format!("rho0 must be > 0, got {rho0}")));
            }
        }
        if !(self.growth_r > 1.0) || !self.growth_r.is_finite() {
            return Err(Error::BadParam(format!(
                "growth factor r must be > 1, got {}",
                self.growth_r
            )));
        }
        for (name, v) in [
            ("eps_inner", self.eps_inner),
            ("eps_outer", self.eps_outer),
            ("bisect_tol", self.bisect_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::BadParam(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.upsilon_margin >= 0.0) {
            return Err(Error::BadParam(format!(
                "upsilon_margin must be >= 0, got {}",
                self.upsilon_margin
            )));
        }
        if self.max_inner == 0 || self.max_outer == 0 || self.feasible_attempts == 0 || self.starts == 0 {
            return Err(Error::BadParam("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_set(a0: f64, a1: f64, a2: f64) -> AutocovSet {
        AutocovSet::new(vec![
            DMatrix::from_element(1, 1, a0),
            DMatrix::from_element(1, 1, a1),
            DMatrix::from_element(1, 1, a2),
        ])
        .unwrap()
    }

    fn random_psd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() / n as f64
    }

    fn random_set(n: usize, q: usize, seed: u64) -> AutocovSet {
        let mut mats: Vec<_> = (0..=q).map(|i| random_psd(n, seed * 31 + i as u64)).collect();
        mats[0] += DMatrix::identity(n, n) * 0.1;
        AutocovSet::new(mats).unwrap()
    }

    #[test]
    fn proxy_mapping() {
        let set = random_set(4, 3, 1);
        let p = build_instance(set.clone(), ProxyKind::Predictability, 0.7, 0.1, 3).unwrap();
        assert_eq!((p.alpha(), p.gamma()), (1.0, 0.0));
        let p = build_instance(set.clone(), ProxyKind::Portmanteau, 0.0, 0.1, 3).unwrap();
        assert_eq!((p.alpha(), p.gamma()), (0.0, 1.0));
        let p = build_instance(set.clone(), ProxyKind::CrossingStats, 0.001, 0.1, 3).unwrap();
        assert_eq!((p.alpha(), p.gamma()), (1.0, 0.001));
        assert_eq!(p.autocov(), &set);
    }

    #[test]
    fn build_instance_rejects_bad_params() {
        let set = random_set(4, 3, 2);
        assert!(matches!(
            build_instance(set.clone(), ProxyKind::Predictability, 0.0, 0.0, 3),
            Err(Error::BadParam(_))
        ));
        assert!(matches!(
            build_instance(set.clone(), ProxyKind::Predictability, 0.0, 0.1, 0),
            Err(Error::BadParam(_))
        ));
        assert!(matches!(
            build_instance(set, ProxyKind::Predictability, 0.0, 0.1, 5),
            Err(Error::BadParam(_))
        ));
    }

    #[test]
    fn autocov_set_rejects_invalid() {
        let sym = DMatrix::identity(2, 2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let neg = -DMatrix::<f64>::identity(2, 2);
        assert!(matches!(
            AutocovSet::new(vec![sym.clone(), asym, sym.clone()]),
            Err(Error::NonPsdInput(_))
        ));
        assert!(matches!(
            AutocovSet::new(vec![sym.clone(), neg.clone(), sym.clone()]),
            Err(Error::NonPsdInput(_))
        ));
        assert!(matches!(
            AutocovSet::new(vec![DMatrix::zeros(2, 2), sym.clone(), sym.clone()]),
            Err(Error::NonPsdInput(_))
        ));
        assert!(matches!(
            AutocovSet::new(vec![sym.clone(), sym.clone()]),
            Err(Error::NonPsdInput(_))
        ));
        let indef = AutocovSet::new_indefinite(vec![sym.clone(), neg, sym]).unwrap();
        assert!(!indef.lags_psd());
    }

    #[test]
    fn objective_hand_values() {
        let inst = ProblemInstance::new(scalar_set(1.0, 2.0, 0.0), 1, 0.0, 0.5, 1).unwrap();
        let one = DVector::from_element(1, 1.0);
        assert_eq!(eval_objective(&inst, &DVector::zeros(1)).unwrap(), 0.0);
        assert_eq!(eval_objective(&inst, &one).unwrap(), 2.0);
        let inst = ProblemInstance::new(scalar_set(1.0, 5.0, 3.0), 0, 1.0, 0.5, 1).unwrap();
        assert_eq!(eval_objective(&inst, &one).unwrap(), 9.0);
        assert!(matches!(
            eval_objective(&inst, &DVector::zeros(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn qrho_hand_values() {
        let inst = ProblemInstance::new(scalar_set(1.0, 1.0, 0.0), 1, 0.0, 0.5, 1).unwrap();
        let p = TriplePoint::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 1.0),
        );
        assert_eq!(eval_qrho(&inst, &p, 2.0).unwrap(), 3.0);

        let zero = ProblemInstance::new(random_set(3, 3, 5), 0, 0.0, 0.5, 2).unwrap();
        let d = TriplePoint::diagonal(DVector::from_vec(vec![0.3, -1.0, 2.0]));
        assert_eq!(eval_qrho(&zero, &d, 1.0).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn qrho_on_diagonal_matches_objective(
            seed in 0u64..500,
            xs in prop::collection::vec(-2.0f64..2.0, 5),
            rho in 0.01f64..100.0,
            gamma in 0.0f64..3.0,
            alpha in 0u8..2,
        ) {
            let inst = ProblemInstance::new(random_set(5, 3, seed), alpha, gamma, 0.1, 3).unwrap();
            let x = DVector::from_vec(xs);
            let f = eval_objective(&inst, &x).unwrap();
            let d = TriplePoint::diagonal(x.clone());
            let q1 = eval_qrho(&inst, &d, rho).unwrap();
            let q2 = eval_qrho(&inst, &d, 2.0 * rho).unwrap();
            prop_assert!((f - q1).abs() <= 1e-12 * (1.0 + f.abs()));
            prop_assert_eq!(q1, q2);
            // even and nonnegative
            prop_assert_eq!(f, eval_objective(&inst, &(-&x)).unwrap());
            prop_assert!(f >= 0.0);
        }
    }
}
