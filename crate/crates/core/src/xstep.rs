//! Global solution of the x-block subproblem
//!
//! ```text
//! minimize  xᵀHx − 2bᵀx + c   subject to  xᵀA_0x ≥ φ
//! ```
//!
//! with `H = α·A_1 + γ·Σ(zᵀA_iz)A_i + 2ρI` and `b = ρ(y + z)`.
//!
//! A single quadratic constraint QCQP has no duality gap, so `x` is a global
//! minimizer iff there is `λ ≥ 0` with `(H − λA_0)x = b`, `H − λA_0 ⪰ 0` and
//! `λ(xᵀA_0x − φ) = 0`. After the reduction `A_0 = LLᵀ`, `u = Lᵀx`, the
//! problem is diagonalized by the eigenpairs `(λ_i, v_i)` of `L⁻¹HL⁻ᵀ` and the
//! multiplier is the root of the secular function
//! `g(λ) = Σ c_i²/(λ_i − λ)² − φ` on `[0, λ_1)`, `c = Vᵀ L⁻¹ b`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{quad_form, sorted_eigen, symmetric_part};
use crate::model::ProblemInstance;

const MAX_BISECTIONS: usize = 200;
const BRACKET_SHRINK: f64 = 1e-12;
const CLUSTER_TOL: f64 = 1e-12;

/// Data of one x-step: `xᵀHx − 2bᵀx + offset` over `{x : xᵀA_0x ≥ φ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct XStepSystem {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a0: DMatrix<f64>,
    pub phi: f64,
    /// Constant term `ρ(‖y‖² + ‖z‖²)`, so that [`XStepSystem::objective`]
    /// equals `q_ρ(x, y, z)`.
    pub offset: f64,
}

/// Which branch of the solver produced the minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XStepBranch {
    /// Unconstrained minimizer is feasible, `λ = 0`.
    Interior,
    /// Constraint active, `λ` from the secular equation.
    Boundary,
    /// Constraint active at `λ = λ_min(H, A_0)` with an eigenvector correction.
    HardCase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XStepResult {
    pub x: DVector<f64>,
    pub lambda: f64,
    pub active: bool,
    pub branch: XStepBranch,
    /// `‖(H − λA_0)x − b‖`.
    pub kkt_residual: f64,
    /// `xᵀHx − 2bᵀx + offset` at the returned point.
    pub objective: f64,
    pub bisections: usize,
}

impl XStepSystem {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>, a0: DMatrix<f64>, phi: f64) -> Result<Self> {
        let n = b.len();
        for m in [&h, &a0] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: m.nrows(),
                });
            }
        }
        if !(phi > 0.0) {
            return Err(Error::BadParam(format!("phi must be > 0, got {phi}")));
        }
        Ok(Self {
            h,
            b,
            a0,
            phi,
            offset: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        quad_form(&self.h, x) - 2.0 * self.b.dot(x) + self.offset
    }

    /// `g(λ) = x(λ)ᵀA_0x(λ) − φ` with `x(λ)` from a direct factorization of
    /// `H − λA_0`. Only defined below `λ_min(H, A_0)`.
    pub fn secular(&self, lambda: f64) -> Result<f64> {
        let shifted = symmetric_part(&(&self.h - &self.a0 * lambda));
        let chol = Cholesky::new(shifted).ok_or(Error::XStepUnbounded {
            min_gen_eig: f64::NAN,
        })?;
        let x = chol.solve(&self.b);
        Ok(quad_form(&self.a0, &x) - self.phi)
    }

    /// `‖(H − λA_0)x − b‖`.
    pub fn stationarity_residual(&self, x: &DVector<f64>, lambda: f64) -> f64 {
        (&self.h * x - &self.a0 * x * lambda - &self.b).norm()
    }
}

/// Builds the x-step for `min_{x ∈ 𝒳} q_ρ(x, y, z)`.
pub fn assemble_xstep(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
) -> Result<XStepSystem> {
    inst.check_len(y)?;
    inst.check_len(z)?;
    if !(rho > 0.0) {
        return Err(Error::BadParam(format!("rho must be > 0, got {rho}")));
    }
    let n = inst.dim();
    let mut h = DMatrix::identity(n, n) * (2.0 * rho);
    if inst.alpha() != 0.0 {
        h += inst.a1();
    }
    if inst.gamma() != 0.0 {
        for (a, w) in inst.autocov().higher_lags().iter().zip(inst.lag_forms(z)) {
            if w != 0.0 {
                h += a * (inst.gamma() * w);
            }
        }
    }
    Ok(XStepSystem {
        h: symmetric_part(&h),
        b: (y + z) * rho,
        a0: inst.a0().clone(),
        phi: inst.phi(),
        offset: rho * (y.norm_squared() + z.norm_squared()),
    })
}

/// Smallest eigenvalue of the pencil `(H, A_0)`, i.e. of `L⁻¹HL⁻ᵀ` where
/// `A_0 = LLᵀ`.
pub fn min_gen_eig(h: &DMatrix<f64>, a0: &DMatrix<f64>) -> Result<f64> {
    let reduced = Reduced::new(h, a0)?;
    Ok(reduced.values[0])
}

/// The pencil in the eigenbasis of `L⁻¹HL⁻ᵀ`.
struct Reduced {
    l: DMatrix<f64>,
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl Reduced {
    fn new(h: &DMatrix<f64>, a0: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::<f64, Dyn>::new(symmetric_part(a0)).ok_or(Error::A0NotPd)?;
        let l = chol.l();
        let left = l
            .solve_lower_triangular(&symmetric_part(h))
            .ok_or(Error::A0NotPd)?;
        let reduced = l
            .solve_lower_triangular(&left.transpose())
            .ok_or(Error::A0NotPd)?;
        let (values, vectors) = sorted_eigen(&reduced);
        Ok(Self { l, values, vectors })
    }

    fn coefficients(&self, b: &DVector<f64>) -> DVector<f64> {
        let bt = self
            .l
            .solve_lower_triangular(b)
            .expect("Cholesky factor is nonsingular");
        self.vectors.transpose() * bt
    }

    /// `x = L⁻ᵀ u`.
    fn to_x(&self, u: &DVector<f64>) -> DVector<f64> {
        self.l
            .transpose()
            .solve_upper_triangular(u)
            .expect("Cholesky factor is nonsingular")
    }
}

fn secular_reduced(values: &DVector<f64>, c: &DVector<f64>, lambda: f64, phi: f64) -> f64 {
    values
        .iter()
        .zip(c.iter())
        .map(|(&li, &ci)| {
            let r = ci / (li - lambda);
            r * r
        })
        .sum::<f64>()
        - phi
}

fn u_at(values: &DVector<f64>, vectors: &DMatrix<f64>, c: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let weights = DVector::from_iterator(
        values.len(),
        values.iter().zip(c.iter()).map(|(&li, &ci)| ci / (li - lambda)),
    );
    vectors * weights
}

/// Global minimizer of the x-step. `tol` bounds the relative constraint
/// violation `|xᵀA_0x − φ| ≤ tol·φ` on the boundary branch.
pub fn solve_xstep(sys: &XStepSystem, tol: f64) -> Result<XStepResult> {
    if !(tol > 0.0) {
        return Err(Error::BadParam(format!("tol must be > 0, got {tol}")));
    }
    let reduced = Reduced::new(&sys.h, &sys.a0)?;
    let lam_min = reduced.values[0];
    if !(lam_min > 0.0) {
        return Err(Error::XStepUnbounded {
            min_gen_eig: lam_min,
        });
    }
    let c = reduced.coefficients(&sys.b);
    let phi = sys.phi;
    let finish = |u: DVector<f64>, lambda: f64, branch: XStepBranch, bisections: usize| {
        let x = reduced.to_x(&u);
        XStepResult {
            kkt_residual: sys.stationarity_residual(&x, lambda),
            objective: sys.objective(&x),
            active: branch != XStepBranch::Interior,
            lambda,
            branch,
            bisections,
            x,
        }
    };

    let g0 = secular_reduced(&reduced.values, &c, 0.0, phi);
    if g0 >= -tol * phi {
        let u = u_at(&reduced.values, &reduced.vectors, &c, 0.0);
        return Ok(finish(u, 0.0, XStepBranch::Interior, 0));
    }

    let mut lo = 0.0;
    let mut hi = lam_min * (1.0 - BRACKET_SHRINK);
    if secular_reduced(&reduced.values, &c, hi, phi) < 0.0 {
        return Ok(hard_case(sys, &reduced, &c, finish));
    }
    for it in 1..=MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let g = secular_reduced(&reduced.values, &c, mid, phi);
        if g.abs() <= tol * phi {
            let u = u_at(&reduced.values, &reduced.vectors, &c, mid);
            return Ok(finish(u, mid, XStepBranch::Boundary, it));
        }
        if g < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid <= lo && mid >= hi || hi - lo <= 4.0 * f64::EPSILON * hi {
            // bracket exhausted at machine precision; keep the feasible end
            let u = u_at(&reduced.values, &reduced.vectors, &c, hi);
            return Ok(finish(u, hi, XStepBranch::Boundary, it));
        }
    }
    let u = u_at(&reduced.values, &reduced.vectors, &c, hi);
    Err(Error::XStepNonconvergence(Box::new(finish(
        u,
        hi,
        XStepBranch::Boundary,
        MAX_BISECTIONS,
    ))))
}

fn hard_case(
    sys: &XStepSystem,
    reduced: &Reduced,
    c: &DVector<f64>,
    finish: impl Fn(DVector<f64>, f64, XStepBranch, usize) -> XStepResult,
) -> XStepResult {
    let values = &reduced.values;
    let lam_min = values[0];
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let n = values.len();
    // minimum-norm (in the A_0 metric) solution of the singular system
    let mut u_hat = DVector::zeros(n);
    for i in 0..n {
        if values[i] - lam_min > CLUSTER_TOL * scale {
            u_hat += reduced.vectors.column(i) * (c[i] / (values[i] - lam_min));
        }
    }
    let theta = (sys.phi - u_hat.norm_squared()).max(0.0).sqrt();
    let v = reduced.vectors.column(0).into_owned();
    let plus = finish(&u_hat + &v * theta, lam_min, XStepBranch::HardCase, 0);
    let minus = finish(&u_hat - &v * theta, lam_min, XStepBranch::HardCase, 0);
    if minus.objective < plus.objective {
        minus
    } else {
        plus
    }
}
