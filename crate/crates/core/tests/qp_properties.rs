mod common;

use common::*;
use nodecbf::qp::kkt_residual;
use nodecbf::{qp_solve, QpProblem, QpStatus, SafetyConstraint, Vec3};
use proptest::prelude::*;

#[test]
fn matches_brute_force_on_ten_thousand_problems() {
    let mut rng = rng(2024);
    for case in 0..10_000 {
        let p = feasible_problem(&mut rng, 4);
        let sol = qp_solve(&p);
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}: {p:?}");
        let oracle = brute_force_projection(&p).expect("feasible by construction");
        let err = (sol.u - oracle).amax();
        assert!(err <= 1e-6, "case {case}: {:?} vs {:?} ({err})", sol.u, oracle);
    }
}

fn problem() -> impl Strategy<Value = QpProblem> {
    (any::<u64>(), 0usize..=4).prop_map(|(seed, n)| feasible_problem(&mut rng(seed), n))
}

proptest! {
    #[test]
    fn kkt_conditions_hold(p in problem()) {
        let sol = qp_solve(&p);
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(kkt_residual(&p, &sol) <= 1e-8);
        for c in &p.constraints {
            prop_assert!(c.margin(&sol.u) >= -1e-8);
        }
    }

    #[test]
    fn feasible_desired_control_is_returned_exactly(p in problem()) {
        let sol = qp_solve(&p);
        let again = qp_solve(&QpProblem { u_des: sol.u, constraints: p.constraints.clone() });
        let strict = p.constraints.iter().all(|c| c.margin(&p.u_des) >= 0.0);
        if strict {
            prop_assert_eq!(sol.u, p.u_des);
        }
        prop_assert!((again.u - sol.u).amax() <= 1e-12);
    }

    #[test]
    fn positive_scaling_leaves_solution_unchanged(p in problem(), scale in 1e-3f64..1e3) {
        let scaled = QpProblem {
            u_des: p.u_des,
            constraints: p.constraints.iter().map(|c| SafetyConstraint::new(c.a * scale, c.b * scale)).collect(),
        };
        let a = qp_solve(&p).u;
        let b = qp_solve(&scaled).u;
        prop_assert!((a - b).amax() <= 1e-9 * (1.0 + a.amax()));
    }
}

#[test]
fn single_violated_constraint_is_closed_form_projection() {
    let mut rng = rng(5);
    for _ in 0..1000 {
        let a = vec3(&mut rng, -5.0, 5.0);
        let u_des = vec3(&mut rng, -5.0, 5.0);
        let b = a.dot(&u_des) + 1.0;
        let sol = qp_solve(&QpProblem {
            u_des,
            constraints: vec![SafetyConstraint::new(a, b)],
        });
        let expected = u_des + a * ((b - a.dot(&u_des)) / a.norm_squared());
        assert!((sol.u - expected).amax() <= 1e-12);
        assert_eq!(sol.active_set, vec![0]);
    }
}

#[test]
fn axis_constraints_match_grid_search() {
    // u_x ≥ 1, u_y ≥ 1 from u_des = 0; a coarse grid around the answer finds nothing closer.
    let p = QpProblem {
        u_des: Vec3::zeros(),
        constraints: vec![
            SafetyConstraint::new(Vec3::x(), 1.0),
            SafetyConstraint::new(Vec3::y(), 1.0),
        ],
    };
    let sol = qp_solve(&p).u;
    assert!((sol - Vec3::new(1.0, 1.0, 0.0)).amax() <= 1e-12);
    let mut best = f64::INFINITY;
    for i in 0..=40 {
        for j in 0..=40 {
            for k in -20..=20 {
                let u = Vec3::new(1.0 + i as f64 * 0.05, 1.0 + j as f64 * 0.05, k as f64 * 0.05);
                best = best.min(u.norm_squared());
            }
        }
    }
    assert!(sol.norm_squared() <= best + 1e-12);
}
