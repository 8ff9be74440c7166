//! Sparse, volatile, mean-reverting portfolios by penalty decomposition.
//!
//! The solver minimizes a predictability, portmanteau or crossing-statistics
//! proxy `α·xᵀA_1x + γ·Σ_{i≥2}(xᵀA_ix)²` over unit vectors with at most `k`
//! nonzeros and volatility `xᵀA_0x ≥ φ`. Splitting `x` into copies that each
//! carry one constraint gives three subproblems with global solutions, which
//! are cycled by block coordinate descent inside a penalty continuation loop.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod bcd;
pub mod commands;
pub mod config;
pub mod error;
pub mod estimation;
pub mod io;
pub mod linalg;
pub mod model;
pub mod par;
pub mod ppc;
pub mod selftest;
pub mod xstep;
pub mod yz;

pub use error::{Error, Result};
pub use model::{AutocovSet, ProblemInstance, ProxyKind, SolverConfig, TriplePoint};
