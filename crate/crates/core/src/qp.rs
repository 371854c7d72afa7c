//! Minimum-norm safety filter QP: `min ‖u − u_des‖²` s.t. `a_i·u ≥ b_i`.
//!
//! The problem is a Euclidean projection onto an intersection of half-spaces in R³,
//! so every candidate active set has a closed-form solution. A dual active-set
//! iteration handles the common case; exhaustive enumeration of active sets (at most
//! three independent rows in R³) backs it up and decides infeasibility.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Vec3;

/// Affine-in-control inequality `a·u ≥ b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyConstraint {
    pub a: Vec3,
    pub b: f64,
}

impl SafetyConstraint {
    pub fn new(a: Vec3, b: f64) -> Self {
        SafetyConstraint { a, b }
    }

    /// `a·u − b`; non-negative when satisfied.
    pub fn margin(&self, u: &Vec3) -> f64 {
        self.a.dot(u) - self.b
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.a.iter().all(|c| c.is_finite())
    }

    fn scaled_tol(&self) -> f64 {
        FEAS_TOL * (1.0 + self.b.abs() + self.a.norm())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpProblem {
    pub u_des: Vec3,
    pub constraints: Vec<SafetyConstraint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub u: Vec3,
    /// Sorted indices of the constraints in the optimal working set.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint; zero off the active set. `u − u_des = Σ λ_i a_i`.
    pub multipliers: Vec<f64>,
    pub status: QpStatus,
}

const FEAS_TOL: f64 = 1e-11;
const MULT_TOL: f64 = 1e-12;
const MAX_ITERS: usize = 64;

/// Solves the projection QP exactly.
///
/// On an infeasible problem, `u` is the least-violating control (see [`least_violating`]) and
/// the status is [`QpStatus::Infeasible`].
pub fn qp_solve(p: &QpProblem) -> QpSolution {
    if let Some(sol) = dual_active_set(p) {
        return sol;
    }
    if let Some(sol) = enumerate(p) {
        return sol;
    }
    let u = least_violating(p);
    QpSolution {
        u,
        active_set: Vec::new(),
        multipliers: vec![0.0; p.constraints.len()],
        status: QpStatus::Infeasible,
    }
}

/// Projection of `u_des` onto `{u : a_i·u = b_i, i ∈ set}`.
/// Returns `None` when the rows in `set` are linearly dependent.
fn project(p: &QpProblem, set: &[usize]) -> Option<(Vec3, Vec<f64>)> {
    if set.is_empty() {
        return Some((p.u_des, Vec::new()));
    }
    if set.len() > 3 {
        return None;
    }
    let k = set.len();
    let rows: Vec<&SafetyConstraint> = set.iter().map(|&i| &p.constraints[i]).collect();
    let gram = DMatrix::from_fn(k, k, |i, j| rows[i].a.dot(&rows[j].a));
    let rhs = DVector::from_fn(k, |i, _| rows[i].b - rows[i].a.dot(&p.u_des));
    // Rank check on the Gram matrix relative to the row norms.
    let scale = rows.iter().map(|r| r.a.norm_squared()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let sv = gram.clone().singular_values();
    if sv.min() <= 1e-12 * scale {
        return None;
    }
    let lam = gram.lu().solve(&rhs)?;
    let mut u = p.u_des;
    for (i, r) in rows.iter().enumerate() {
        u += r.a * lam[i];
    }
    Some((u, lam.iter().copied().collect()))
}

fn build(p: &QpProblem, set: &[usize], u: Vec3, lam: &[f64]) -> QpSolution {
    let mut multipliers = vec![0.0; p.constraints.len()];
    for (pos, &i) in set.iter().enumerate() {
        multipliers[i] = lam[pos].max(0.0);
    }
    let mut active_set = set.to_vec();
    active_set.sort_unstable();
    QpSolution {
        u,
        active_set,
        multipliers,
        status: QpStatus::Optimal,
    }
}

fn all_satisfied(p: &QpProblem, u: &Vec3) -> bool {
    p.constraints.iter().all(|c| c.margin(u) >= -c.scaled_tol())
}

fn dual_active_set(p: &QpProblem) -> Option<QpSolution> {
    let mut working: Vec<usize> = Vec::new();
    for _ in 0..MAX_ITERS {
        let (u, lam) = project(p, &working)?;
        if let Some((pos, _)) = lam
            .iter()
            .enumerate()
            .filter(|(_, l)| **l < -MULT_TOL)
            .min_by(|a, b| a.1.total_cmp(b.1))
        {
            working.remove(pos);
            continue;
        }
        let worst = p
            .constraints
            .iter()
            .enumerate()
            .filter(|(i, _)| !working.contains(i))
            .map(|(i, c)| (i, c.margin(&u) / c.a.norm().max(f64::MIN_POSITIVE), c.margin(&u) + c.scaled_tol()))
            .filter(|(_, _, slack)| *slack < 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            None => return Some(build(p, &working, u, &lam)),
            Some((j, _, _)) => working.push(j),
        }
    }
    None
}

/// Visits active sets in lexicographic order of their sorted index lists and returns the
/// first one satisfying the KKT conditions.
fn enumerate(p: &QpProblem) -> Option<QpSolution> {
    let n = p.constraints.len();
    let mut stack: Vec<usize> = Vec::new();
    // Depth-first generation yields lexicographic order: [], [0], [0,1], [0,1,2], [0,2], ...
    fn visit(p: &QpProblem, n: usize, start: usize, stack: &mut Vec<usize>) -> Option<QpSolution> {
        if let Some((u, lam)) = project(p, stack) {
            if lam.iter().all(|l| *l >= -MULT_TOL) && all_satisfied(p, &u) {
                return Some(build(p, stack, u, &lam));
            }
        }
        if stack.len() == 3 {
            return None;
        }
        for i in start..n {
            stack.push(i);
            if let Some(sol) = visit(p, n, i + 1, stack) {
                return Some(sol);
            }
            stack.pop();
        }
        None
    }
    visit(p, n, 0, &mut stack)
}

fn feasible_with_shift(p: &QpProblem, shift: f64) -> Option<Vec3> {
    let shifted = QpProblem {
        u_des: p.u_des,
        constraints: p
            .constraints
            .iter()
            .map(|c| SafetyConstraint::new(c.a, c.b - shift))
            .collect(),
    };
    dual_active_set(&shifted).or_else(|| enumerate(&shifted)).map(|s| s.u)
}

/// Control closest to `u_des` among the minimizers of `max_i (b_i − a_i·u)`.
///
/// The optimal violation level is found by bisection on a uniform relaxation of all
/// right-hand sides.
pub fn least_violating(p: &QpProblem) -> Vec3 {
    let mut hi = p
        .constraints
        .iter()
        .map(|c| -c.margin(&p.u_des))
        .fold(0.0, f64::max);
    let mut best = p.u_des;
    let mut lo = 0.0;
    for _ in 0..100 {
        if hi - lo <= 1e-12 * (1.0 + hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match feasible_with_shift(p, mid) {
            Some(u) => {
                hi = mid;
                best = u;
            }
            None => lo = mid,
        }
    }
    best
}

/// Largest KKT residual of a solution: stationarity, primal feasibility, dual feasibility and
/// complementary slackness.
pub fn kkt_residual(p: &QpProblem, sol: &QpSolution) -> f64 {
    let mut stationarity = sol.u - p.u_des;
    let mut worst: f64 = 0.0;
    for (c, &lam) in p.constraints.iter().zip(&sol.multipliers) {
        stationarity -= c.a * lam;
        worst = worst.max(-c.margin(&sol.u)).max(-lam).max((lam * c.margin(&sol.u)).abs());
    }
    worst.max(stationarity.norm())
}
