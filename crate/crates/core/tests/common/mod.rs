//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nodecbf::controllers::{
    hoacbf_control, hoacbf_update, hocbf_control, nodehoacbf_control, AdaptiveEstimate, CbfGains, HistoryEntry,
    KnowledgeKind, Obstacle,
};
use nodecbf::knode::{loss_and_gradient, loss_on_samples, Sample, TrainerConfig};
use nodecbf::{true_step, ParamVector, QpProblem, ResidualKind, ResidualNet, SafetyConstraint, State, Vec3, Vec6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec3 {
    Vec3::from_fn(|_, _| rng.gen_range(lo..hi))
}

/// Random feasible projection problem with up to `max_n` constraints: each half-space
/// contains a common point `p`, some with `p` exactly on the boundary.
pub fn feasible_problem(rng: &mut ChaCha8Rng, max_n: usize) -> QpProblem {
    let n = rng.gen_range(0..=max_n);
    let p = vec3(rng, -3.0, 3.0);
    let constraints = (0..n)
        .map(|_| {
            let a = vec3(rng, -5.0, 5.0);
            let slack = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..2.0) };
            SafetyConstraint::new(a, a.dot(&p) - slack)
        })
        .collect();
    QpProblem {
        u_des: vec3(rng, -5.0, 5.0),
        constraints,
    }
}

/// Brute-force projection: for every subset of constraints, project `u_des` onto the
/// affine hull of that subset (least-norm correction via the pseudo-inverse), keep the
/// candidates that satisfy every constraint, and return the closest one.
pub fn brute_force_projection(p: &QpProblem) -> Option<Vec3> {
    let n = p.constraints.len();
    let mut best: Option<(f64, Vec3)> = None;
    for mask in 0u32..(1 << n) {
        let rows: Vec<&SafetyConstraint> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &p.constraints[i]).collect();
        let u = if rows.is_empty() {
            p.u_des
        } else {
            let a = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i].a[j]);
            let r = DVector::from_fn(rows.len(), |i, _| rows[i].b - rows[i].a.dot(&p.u_des));
            let pinv = match a.clone().pseudo_inverse(1e-12) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let du = &pinv * &r;
            if (&a * &du - &r).norm() > 1e-9 * (1.0 + r.norm()) {
                continue;
            }
            p.u_des + Vec3::new(du[0], du[1], du[2])
        };
        let feasible = p
            .constraints
            .iter()
            .all(|c| c.margin(&u) >= -1e-9 * (1.0 + c.b.abs() + c.a.norm()));
        if !feasible {
            continue;
        }
        let d = (u - p.u_des).norm_squared();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, u));
        }
    }
    best.map(|(_, u)| u)
}

/// Random state around the obstacle scenario: positions in a 10 m cube around the origin,
/// velocities up to 3 m/s per axis.
pub fn random_state(rng: &mut ChaCha8Rng) -> State {
    State::new(vec3(rng, -5.0, 5.0), vec3(rng, -3.0, 3.0))
}

pub fn random_obstacles(rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| Obstacle::new(vec3(rng, -2.0, 2.0), rng.gen_range(0.5..3.0)))
        .collect()
}

/// Largest pairwise difference between the controls of HOCBF, HO-aCBF with `θ̂ = 0` (both
/// regressors) and NODE-HO-aCBF with an all-zero network at one state.
pub fn reduction_gap(x: &State, obstacles: &[Obstacle], gains: &CbfGains, u_des: Vec3) -> f64 {
    let base = hocbf_control(x, obstacles, gains, u_des).u;
    let est = AdaptiveEstimate::symmetric(4.0);
    let zero_net = ResidualNet::zeros(16);
    [
        hoacbf_control(x, obstacles, gains, &est, KnowledgeKind::StateY, u_des).u,
        hoacbf_control(x, obstacles, gains, &est, KnowledgeKind::ConstY, u_des).u,
        nodehoacbf_control(x, obstacles, gains, &zero_net, u_des).u,
    ]
    .iter()
    .map(|u| (u - base).amax())
    .fold(0.0, f64::max)
}

/// Worst reduction gap over `n` random states.
pub fn reduction_chain_worst(n: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let gains = CbfGains::default();
    (0..n)
        .map(|_| {
            let x = random_state(&mut rng);
            let obstacles = random_obstacles(&mut rng);
            let u_des = vec3(&mut rng, -10.0, 10.0);
            reduction_gap(&x, &obstacles, &gains, u_des)
        })
        .fold(0.0, f64::max)
}

/// Returns the smallest `|a·u − b|` over the constraints if the filter changed the control
/// (None when it left `u_des` untouched).
pub fn minimality_gap(x: &State, obstacles: &[Obstacle], gains: &CbfGains, u_des: Vec3) -> Option<f64> {
    let out = hocbf_control(x, obstacles, gains, u_des);
    if out.infeasible() || out.u == out.u_des {
        return None;
    }
    Some(
        out.constraints
            .iter()
            .map(|c| c.margin(&out.u).abs())
            .fold(f64::INFINITY, f64::min),
    )
}

/// Random history stack for the adaptive update.
pub fn random_history(rng: &mut ChaCha8Rng, len: usize) -> Vec<HistoryEntry> {
    (0..len)
        .map(|_| HistoryEntry {
            x: random_state(rng),
            u: vec3(rng, -5.0, 5.0),
            x_dot: Vec6::from_fn(|_, _| rng.gen_range(-20.0..20.0)),
        })
        .collect()
}

/// Runs many aggressive updates and returns the largest `|θ̂_i|` ever observed.
pub fn theta_extreme(seed: u64, updates: usize) -> f64 {
    let mut rng = rng(seed);
    let mut est = AdaptiveEstimate::symmetric(4.0);
    let mut worst: f64 = 0.0;
    for _ in 0..updates {
        let len = rng.gen_range(1..8);
        let history = random_history(&mut rng, len);
        let kind = if rng.gen_bool(0.5) { KnowledgeKind::StateY } else { KnowledgeKind::ConstY };
        let kappa = 10f64.powf(rng.gen_range(-2.0..3.0));
        let gamma = nalgebra::Matrix3::identity() * 10f64.powf(rng.gen_range(-5.0..2.0));
        est = hoacbf_update(&est, &history, kind, kappa, &gamma, 0.01);
        worst = worst.max(est.theta.amax());
    }
    worst
}

/// Deterministic excitation trajectory of the perturbed plant.
pub fn excited_trajectory(kind: ResidualKind, n: usize, dt: f64) -> Vec<Sample> {
    let mut x = State::new(Vec3::new(2.0, 0.5, 1.0), Vec3::new(0.0, 0.8, -0.1));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let u = Vec3::new((0.7 * t).sin(), (0.3 * t).cos() - 0.5, 0.2 * (1.1 * t).sin());
        out.push(Sample { t, x, u });
        x = true_step(&x, &u, kind, t, dt).unwrap();
    }
    out
}

/// Worst relative error between the analytic Jacobian and central differences.
pub fn jacobian_fd_error(net: &ResidualNet, x: &Vec6) -> f64 {
    let jac = net.jacobian(x);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for col in 0..6 {
        let mut xp = *x;
        let mut xm = *x;
        xp[col] += eps;
        xm[col] -= eps;
        let fd = (net.forward(&xp) - net.forward(&xm)) / (2.0 * eps);
        for row in 0..6 {
            let a = jac[(row, col)];
            worst = worst.max((a - fd[row]).abs() / a.abs().max(1e-3));
        }
    }
    worst
}

/// Worst relative error between the analytic loss gradient and central differences on a
/// 5-sample queue.
pub fn loss_gradient_fd_error(seed: u64) -> f64 {
    let data = excited_trajectory(ResidualKind::TimeVarying(1.0), 5, 0.05);
    let hidden = 6;
    let net = ResidualNet::random(hidden, seed);
    let cfg = TrainerConfig {
        lambda: 1e-3,
        hidden,
        ..Default::default()
    };
    let (_, grad) = loss_and_gradient(&net, &data, &cfg).unwrap();
    let base = net.flatten();
    let eps = 1e-5;
    let loss_at = |idx: usize, delta: f64| {
        let mut p = base.0.clone();
        p[idx] += delta;
        let n = ResidualNet::from_params(hidden, ParamVector(p)).unwrap();
        loss_on_samples(&n, &data, &cfg).unwrap()
    };
    let mut worst: f64 = 0.0;
    for idx in 0..net.param_len() {
        let fd = (loss_at(idx, eps) - loss_at(idx, -eps)) / (2.0 * eps);
        let a = grad.0[idx];
        let scale = a.abs().max(fd.abs());
        if scale < 1e-9 {
            continue;
        }
        worst = worst.max((a - fd).abs() / scale);
    }
    worst
}

/// Global-error ratio of RK4 between steps `h = 1/8` and `h/2` on `ẋ = Ax + B sin(t) e`.
pub fn rk4_convergence_ratio() -> f64 {
    let e = Vec3::new(1.0, -0.5, 0.25);
    let x0 = State::new(Vec3::new(0.3, 0.0, -0.2), Vec3::new(0.0, 1.0, 0.0));
    let integrate = |steps: usize| {
        let h = 1.0 / steps as f64;
        let mut x = x0;
        for i in 0..steps {
            let t = i as f64 * h;
            x = nodecbf::rk4_step(
                |y, s| {
                    let u = e * s.sin();
                    Vec6::new(y[3], y[4], y[5], u[0], u[1], u[2])
                },
                &x,
                t,
                h,
            )
            .unwrap();
        }
        x.0
    };
    let reference = integrate(4096);
    (integrate(8) - reference).norm() / (integrate(16) - reference).norm()
}
