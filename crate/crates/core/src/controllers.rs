//! Tracking and safety controllers: circular reference, PD tracking law, second-order
//! barrier constraint assembly and the three safety filters (HOCBF, concurrent-learning
//! HO-aCBF and the neural-residual NODE-HO-aCBF).

use nalgebra::{Matrix3, Matrix6, Matrix6x3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{velocity_channel, State, StateDerivative, Vec3, Vec6};
use crate::knode::Sample;
use crate::neural::ResidualNet;
use crate::qp::{qp_solve, QpProblem, QpStatus, SafetyConstraint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub r_des: Vec3,
    pub v_des: Vec3,
    pub a_des: Vec3,
}

/// Horizontal circle of radius `radius` at height `height`, centred on the z axis.
pub fn reference_circle(t: f64, radius: f64, height: f64, omega: f64) -> ReferencePoint {
    let (s, c) = (omega * t).sin_cos();
    ReferencePoint {
        r_des: Vec3::new(radius * c, radius * s, height),
        v_des: Vec3::new(-radius * omega * s, radius * omega * c, 0.0),
        a_des: Vec3::new(-radius * omega * omega * c, -radius * omega * omega * s, 0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains { kp: 6.0, kd: 4.0 }
    }
}

/// `u_des = a_des + kp (r_des − r) + kd (v_des − v)`.
pub fn pid_desired_control(x: &State, reference: &ReferencePoint, gains: &PidGains) -> Vec3 {
    reference.a_des + (reference.r_des - x.r()) * gains.kp + (reference.v_des - x.v()) * gains.kd
}

/// Spherical forbidden region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec3,
    pub safety_radius: f64,
}

impl Obstacle {
    pub fn new(center: Vec3, safety_radius: f64) -> Self {
        Obstacle { center, safety_radius }
    }

    /// Distance from `r` to the sphere surface; negative inside.
    pub fn signed_distance(&self, r: &Vec3) -> f64 {
        (r - self.center).norm() - self.safety_radius
    }
}

/// `h(x) = ‖r − r_obs‖² − D_s²`.
pub fn cbf_value(x: &State, obs: &Obstacle) -> f64 {
    (x.r() - obs.center).norm_squared() - obs.safety_radius * obs.safety_radius
}

/// Linear class-K gains `α_i(h) = γ_i h`, plus an optional tightening `ψ₂ ≥ margin`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbfGains {
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default)]
    pub margin: f64,
}

impl Default for CbfGains {
    fn default() -> Self {
        CbfGains {
            gamma1: 2.0,
            gamma2: 2.0,
            margin: 0.0,
        }
    }
}

/// A model of the unknown residual that can report its value and state Jacobian.
pub trait ResidualModel {
    fn evaluate(&self, x: &State) -> (StateDerivative, Matrix6<f64>);
}

/// The residual-free model used by the plain HOCBF filter.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroResidual;

impl ResidualModel for ZeroResidual {
    fn evaluate(&self, _x: &State) -> (StateDerivative, Matrix6<f64>) {
        (Vec6::zeros(), Matrix6::zeros())
    }
}

impl ResidualModel for ResidualNet {
    fn evaluate(&self, x: &State) -> (StateDerivative, Matrix6<f64>) {
        self.forward_and_jacobian(&x.0)
    }
}

/// First barrier function of the cascade: `ψ₁ = L_f h + L_d̂ h + γ₁ h`.
pub fn psi1(x: &State, obs: &Obstacle, gains: &CbfGains, d_hat: &StateDerivative) -> f64 {
    let e = x.r() - obs.center;
    let d_r = d_hat.fixed_rows::<3>(0);
    2.0 * e.dot(&x.v()) + 2.0 * e.dot(&d_r) + gains.gamma1 * cbf_value(x, obs)
}

/// Expands `ψ₂ = ∇ψ₁·(f + g u + d̂) + γ₂ ψ₁ ≥ 0` into `a·u ≥ b`.
///
/// With `e = r − c` and `d̂ = (d̂_r, d̂_v)`, `∇ψ₁ = (p_r, p_v)` where
/// `p_r = 2v + 2d̂_r + 2 J_rrᵀ e + 2γ₁ e` and `p_v = 2e + 2 J_rvᵀ e`
/// (`J_rr = ∂d̂_r/∂r`, `J_rv = ∂d̂_r/∂v`). Then `a = p_v` and
/// `b = −(p_r·(v + d̂_r) + p_v·d̂_v + γ₂ ψ₁)`.
pub fn assemble_constraint(
    x: &State,
    obs: &Obstacle,
    gains: &CbfGains,
    d_hat: &StateDerivative,
    jac: &Matrix6<f64>,
) -> SafetyConstraint {
    let e = x.r() - obs.center;
    let v = x.v();
    let d_r: Vec3 = d_hat.fixed_rows::<3>(0).into_owned();
    let d_v: Vec3 = d_hat.fixed_rows::<3>(3).into_owned();
    let j_rr = jac.fixed_view::<3, 3>(0, 0);
    let j_rv = jac.fixed_view::<3, 3>(0, 3);

    let p_r = (v + d_r + j_rr.transpose() * e + e * gains.gamma1) * 2.0;
    let p_v = (e + j_rv.transpose() * e) * 2.0;
    let psi1 = psi1(x, obs, gains, d_hat);
    let b = -(p_r.dot(&(v + d_r)) + p_v.dot(&d_v) + gains.gamma2 * psi1) + gains.margin;
    SafetyConstraint::new(p_v, b)
}

/// Result of one safety-filter evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlOutcome {
    pub u: Vec3,
    pub u_des: Vec3,
    pub constraints: Vec<SafetyConstraint>,
    pub status: QpStatus,
}

impl ControlOutcome {
    pub fn infeasible(&self) -> bool {
        self.status == QpStatus::Infeasible
    }

    /// Smallest `ψ₂(x, u)` over the obstacles, as seen by the controller's model.
    pub fn psi2_margin(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.margin(&self.u))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Minimally modifies `u_des` so every obstacle's second-order constraint holds under `model`.
pub fn safety_filter<M: ResidualModel + ?Sized>(
    x: &State,
    obstacles: &[Obstacle],
    gains: &CbfGains,
    model: &M,
    u_des: Vec3,
) -> ControlOutcome {
    let (d_hat, jac) = model.evaluate(x);
    let constraints: Vec<SafetyConstraint> = obstacles
        .iter()
        .map(|o| assemble_constraint(x, o, gains, &d_hat, &jac))
        .collect();
    let problem = QpProblem { u_des, constraints };
    let sol = qp_solve(&problem);
    if sol.status == QpStatus::Infeasible {
        log::warn!("safety QP infeasible at r = {:?}; applying least-violating control", x.r());
    }
    ControlOutcome {
        u: sol.u,
        u_des,
        constraints: problem.constraints,
        status: sol.status,
    }
}

/// Plain HOCBF filter built on the nominal double integrator.
pub fn hocbf_control(x: &State, obstacles: &[Obstacle], gains: &CbfGains, u_des: Vec3) -> ControlOutcome {
    safety_filter(x, obstacles, gains, &ZeroResidual, u_des)
}

/// NODE-HO-aCBF filter: residual value and Jacobian come from the neural model.
pub fn nodehoacbf_control(
    x: &State,
    obstacles: &[Obstacle],
    gains: &CbfGains,
    net: &ResidualNet,
    u_des: Vec3,
) -> ControlOutcome {
    safety_filter(x, obstacles, gains, net, u_des)
}

/// Known regressor `Y(x)` of the parametric residual `d(x) = Y(x) θ̂`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnowledgeKind {
    /// `[0; diag(−r₁, −r₂, −(r₃ − 1))]`
    StateY,
    /// `[0; −I]`
    ConstY,
    /// `[0; diag(r₁, r₂, r₃)]`
    StatePositive,
    /// `[0; I]`
    ConstPositive,
}

pub fn knowledge_matrix(kind: KnowledgeKind, x: &State) -> Matrix6x3<f64> {
    let r = x.r();
    let diag = match kind {
        KnowledgeKind::StateY => Vec3::new(-r[0], -r[1], -(r[2] - 1.0)),
        KnowledgeKind::ConstY => Vec3::repeat(-1.0),
        KnowledgeKind::StatePositive => r,
        KnowledgeKind::ConstPositive => Vec3::repeat(1.0),
    };
    let mut y = Matrix6x3::zeros();
    for i in 0..3 {
        y[(3 + i, i)] = diag[i];
    }
    y
}

/// `∂(Y(x) θ)/∂x`, closed form for each regressor.
pub fn knowledge_jacobian(kind: KnowledgeKind, theta: &Vec3) -> Matrix6<f64> {
    let slope = match kind {
        KnowledgeKind::StateY => -theta,
        KnowledgeKind::StatePositive => *theta,
        KnowledgeKind::ConstY | KnowledgeKind::ConstPositive => return Matrix6::zeros(),
    };
    let mut j = Matrix6::zeros();
    for i in 0..3 {
        j[(3 + i, i)] = slope[i];
    }
    j
}

/// Parameter estimate of the concurrent-learning baseline, kept inside a box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveEstimate {
    pub theta: Vec3,
    pub lo: Vec3,
    pub hi: Vec3,
}

impl AdaptiveEstimate {
    pub fn new(theta: Vec3, lo: Vec3, hi: Vec3) -> Self {
        let mut est = AdaptiveEstimate { theta, lo, hi };
        est.theta = est.project(theta);
        est
    }

    /// Zero estimate with symmetric bounds `[−bound, bound]³`.
    pub fn symmetric(bound: f64) -> Self {
        Self::new(Vec3::zeros(), Vec3::repeat(-bound), Vec3::repeat(bound))
    }

    pub fn project(&self, theta: Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| theta[i].clamp(self.lo[i], self.hi[i]))
    }
}

/// Parametric residual `Y(x) θ̂` as a [`ResidualModel`].
#[derive(Clone, Copy, Debug)]
pub struct ParametricResidual {
    pub kind: KnowledgeKind,
    pub theta: Vec3,
}

impl ResidualModel for ParametricResidual {
    fn evaluate(&self, x: &State) -> (StateDerivative, Matrix6<f64>) {
        (
            knowledge_matrix(self.kind, x) * self.theta,
            knowledge_jacobian(self.kind, &self.theta),
        )
    }
}

/// HO-aCBF filter with `d̂(x) = Y(x) θ̂`.
pub fn hoacbf_control(
    x: &State,
    obstacles: &[Obstacle],
    gains: &CbfGains,
    est: &AdaptiveEstimate,
    kind: KnowledgeKind,
    u_des: Vec3,
) -> ControlOutcome {
    let model = ParametricResidual { kind, theta: est.theta };
    safety_filter(x, obstacles, gains, &model, u_des)
}

/// One entry of the baseline's history stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryEntry {
    pub x: State,
    pub u: Vec3,
    /// Finite-difference estimate of `ẋ` at `x`.
    pub x_dot: Vec6,
}

/// Central differences over consecutive samples; the first and last samples have no
/// two-sided neighbourhood and are dropped.
pub fn history_with_derivatives(samples: &[Sample]) -> Vec<HistoryEntry> {
    samples
        .windows(3)
        .map(|w| HistoryEntry {
            x: w[1].x,
            u: w[1].u,
            x_dot: (w[2].x.0 - w[0].x.0) / (w[2].t - w[0].t),
        })
        .collect()
}

/// Concurrent-learning update over a history stack:
/// `θ̂ ← Π(θ̂ + dt κ Γ Σ_j Y(x_j)ᵀ (ẋ_j − f(x_j) − g u_j − Y(x_j) θ̂))`.
pub fn hoacbf_update(
    est: &AdaptiveEstimate,
    history: &[HistoryEntry],
    kind: KnowledgeKind,
    kappa: f64,
    gamma: &Matrix3<f64>,
    dt: f64,
) -> AdaptiveEstimate {
    if history.is_empty() {
        return *est;
    }
    let mut acc = Vec3::zeros();
    for entry in history {
        let y = knowledge_matrix(kind, &entry.x);
        let nominal = Vec6::new(
            entry.x.0[3],
            entry.x.0[4],
            entry.x.0[5],
            entry.u[0],
            entry.u[1],
            entry.u[2],
        );
        let err = entry.x_dot - nominal - y * est.theta;
        acc += y.transpose() * err;
    }
    let theta = est.theta + gamma * acc * (dt * kappa);
    AdaptiveEstimate {
        theta: est.project(theta),
        ..*est
    }
}

/// Velocity-channel residual `Y(x) θ̂` as seen by the baseline.
pub fn parametric_residual(kind: KnowledgeKind, x: &State, theta: &Vec3) -> StateDerivative {
    let d = knowledge_matrix(kind, x) * theta;
    velocity_channel(d.fixed_rows::<3>(3).into_owned())
}
