//! Instance generators and brute-force oracles shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_meanrev::estimation::{build_autocov_set_default, synth_var1};
use sparse_meanrev::model::{build_instance, ProblemInstance, ProxyKind};

pub fn proxy_for(seed: u64) -> ProxyKind {
    ProxyKind::ALL[(seed % 3) as usize]
}

/// Autocovariances of a seeded VAR(1) path, `q = 3`, with `φ` a random
/// fraction in `[0.3, 1]` of the median asset variance.
pub fn var_instance(seed: u64, n: usize, k: usize, proxy: ProxyKind) -> ProblemInstance {
    var_instance_with(seed, n, k, proxy, 0.3..1.0)
}

pub fn var_instance_with(
    seed: u64,
    n: usize,
    k: usize,
    proxy: ProxyKind,
    phi_fraction: std::ops::Range<f64>,
) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_1a57);
    let radius = rng.random_range(0.3..0.95);
    let series = synth_var1(n, 400, radius, 1.0, seed).expect("valid synth parameters");
    let set = build_autocov_set_default(&series, 3).expect("estimable autocovariances");
    let phi = rng.random_range(phi_fraction) * median(set.a(0).diagonal().as_slice());
    let gamma = match proxy {
        ProxyKind::CrossingStats => rng.random_range(0.1..10.0),
        _ => 0.0,
    };
    build_instance(set, proxy, gamma, phi, k).expect("valid instance")
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Instance with `n` drawn from `n_range` and `k` from `[1, min(n, k_max)]`.
pub fn random_var_instance(seed: u64, n_range: std::ops::RangeInclusive<usize>, k_max: usize) -> ProblemInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = rng.random_range(n_range);
    let k = rng.random_range(1..=n.min(k_max));
    var_instance(seed, n, k, proxy_for(seed))
}

/// `f` restricted to a small support, evaluated on plain arrays.
struct Restricted {
    alpha: f64,
    gamma: f64,
    phi: f64,
    a0: Vec<f64>,
    a1: Vec<f64>,
    lags: Vec<Vec<f64>>,
    m: usize,
}

impl Restricted {
    fn new(inst: &ProblemInstance, support: &[usize]) -> Self {
        let m = support.len();
        let sub = |a: &DMatrix<f64>| {
            let mut v = Vec::with_capacity(m * m);
            for &r in support {
                for &c in support {
                    v.push(a[(r, c)]);
                }
            }
            v
        };
        Self {
            alpha: inst.alpha(),
            gamma: inst.gamma(),
            phi: inst.phi(),
            a0: sub(inst.a0()),
            a1: sub(inst.a1()),
            lags: inst.autocov().higher_lags().iter().map(sub).collect(),
            m,
        }
    }

    fn quad(&self, a: &[f64], x: &[f64]) -> f64 {
        let mut s = 0.0;
        for r in 0..self.m {
            for c in 0..self.m {
                s += x[r] * a[r * self.m + c] * x[c];
            }
        }
        s
    }

    /// Objective, or `None` when the volatility constraint fails.
    fn value(&self, x: &[f64]) -> Option<f64> {
        if self.quad(&self.a0, x) < self.phi {
            return None;
        }
        let mut f = self.alpha * self.quad(&self.a1, x);
        if self.gamma != 0.0 {
            f += self.gamma * self.lags.iter().map(|a| self.quad(a, x).powi(2)).sum::<f64>();
        }
        Some(f)
    }
}

fn point(m: usize, params: &[f64]) -> [f64; 3] {
    match m {
        1 => [1.0, 0.0, 0.0],
        2 => [params[0].cos(), params[0].sin(), 0.0],
        _ => {
            let (th, ph) = (params[0], params[1]);
            [th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]
        }
    }
}

/// Best feasible value of `f` over unit vectors supported on `support`
/// (`|support| ≤ 3`) by a fine angular grid followed by local zooms around
/// the best cells.
fn support_min(inst: &ProblemInstance, support: &[usize]) -> Option<f64> {
    let r = Restricted::new(inst, support);
    let m = support.len();
    let eval = |p: &[f64]| r.value(&point(m, p)[..m]);
    if m == 1 {
        return eval(&[]);
    }
    let (dims, grid, span): (usize, [usize; 2], [f64; 2]) = if m == 2 {
        (1, [20_000, 1], [std::f64::consts::PI, 0.0])
    } else {
        (2, [500, 1000], [std::f64::consts::FRAC_PI_2, std::f64::consts::TAU])
    };
    let mut cells: Vec<(f64, [f64; 2])> = Vec::new();
    for i in 0..=grid[0] {
        for j in 0..grid[1] {
            let p = [
                span[0] * i as f64 / grid[0] as f64,
                span[1] * j as f64 / grid[1].max(1) as f64,
            ];
            if let Some(v) = eval(&p[..dims]) {
                cells.push((v, p));
            }
        }
    }
    if cells.is_empty() {
        return None;
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let step = [span[0] / grid[0] as f64, span[1] / grid[1].max(1) as f64];
    let mut best = cells[0].0;
    for &(v0, p0) in cells.iter().take(8) {
        let (mut bv, mut bp) = (v0, p0);
        let mut width = [2.0 * step[0], 2.0 * step[1]];
        for _ in 0..12 {
            let side = 20;
            for a in 0..=side {
                for b in 0..=if dims == 2 { side } else { 0 } {
                    let p = [
                        bp[0] + width[0] * (2.0 * a as f64 / side as f64 - 1.0),
                        bp[1] + width[1] * (2.0 * b as f64 / side as f64 - 1.0),
                    ];
                    if let Some(v) = eval(&p[..dims]) {
                        if v < bv {
                            bv = v;
                            bp = p;
                        }
                    }
                }
            }
            width = [width[0] / 4.0, width[1] / 4.0];
        }
        best = best.min(bv);
    }
    Some(best)
}

/// Exhaustive minimum of `f` over the feasible set, enumerating all supports
/// of size `1..=k` (`k ≤ 3`).
pub fn exhaustive_min(inst: &ProblemInstance) -> f64 {
    let n = inst.dim();
    let k = inst.k();
    assert!(k <= 3, "oracle parameterizes supports of size at most 3");
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size > k {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if let Some(v) = support_min(inst, &support) {
            best = best.min(v);
        }
    }
    best
}

pub fn unit(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs).normalize()
}
