//! Double-integrator plant, ground-truth residual fields and a fixed-step RK4 integrator.

use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;

/// Acceleration command in m/s².
pub type ControlInput = Vec3;

/// Time derivative of a [`State`]: `(dr, dv)` stacked.
pub type StateDerivative = Vec6;

/// Default integration step (100 Hz).
pub const DEFAULT_DT: f64 = 0.01;

/// Position and velocity of the robot, stored as one flat 6-vector `[r; v]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State(pub Vec6);

impl State {
    pub fn new(r: Vec3, v: Vec3) -> Self {
        let mut x = Vec6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&r);
        x.fixed_rows_mut::<3>(3).copy_from(&v);
        State(x)
    }

    pub fn zeros() -> Self {
        State(Vec6::zeros())
    }

    pub fn r(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn v(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vec6 {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl From<Vec6> for State {
    fn from(x: Vec6) -> Self {
        State(x)
    }
}

/// Stacks a velocity-channel vector under a zero position channel.
pub fn velocity_channel(dv: Vec3) -> StateDerivative {
    let mut d = Vec6::zeros();
    d.fixed_rows_mut::<3>(3).copy_from(&dv);
    d
}

/// Ground-truth perturbation applied to the simulated plant.
///
/// The gain `k` scales a position-proportional acceleration (1/s²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "k", rename_all = "kebab-case")]
pub enum ResidualKind {
    None,
    Attractive(f64),
    Repulsive(f64),
    TimeVarying(f64),
}

impl ResidualKind {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        match *self {
            ResidualKind::None => Ok(()),
            ResidualKind::Attractive(k) | ResidualKind::Repulsive(k) | ResidualKind::TimeVarying(k) => {
                if k >= 0.0 && k.is_finite() {
                    Ok(())
                } else {
                    Err(DynamicsError::InvalidGain(k))
                }
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ResidualKind::None => "none",
            ResidualKind::Attractive(_) => "attractive",
            ResidualKind::Repulsive(_) => "repulsive",
            ResidualKind::TimeVarying(_) => "time-varying",
        }
    }
}

/// The block matrices of the nominal model: `A = [0, I; 0, 0]`.
pub fn nominal_a() -> Matrix6<f64> {
    let mut a = Matrix6::zeros();
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    a
}

/// `ẋ = Ax + Bu` for the double integrator.
pub fn nominal_derivative(x: &State, u: &ControlInput) -> StateDerivative {
    nominal_vec(&x.0, u)
}

#[inline]
pub(crate) fn nominal_vec(x: &Vec6, u: &ControlInput) -> Vec6 {
    Vec6::new(x[3], x[4], x[5], u[0], u[1], u[2])
}

/// Unknown perturbation `d(x, t)`; it only ever acts on the velocity channel.
pub fn true_residual(kind: ResidualKind, x: &State, t: f64) -> StateDerivative {
    residual_vec(kind, &x.0, t)
}

#[inline]
fn residual_vec(kind: ResidualKind, x: &Vec6, t: f64) -> Vec6 {
    let scale = match kind {
        ResidualKind::None => return Vec6::zeros(),
        ResidualKind::Attractive(k) => -k,
        ResidualKind::Repulsive(k) => k,
        ResidualKind::TimeVarying(k) => k * t.sin(),
    };
    Vec6::new(0.0, 0.0, 0.0, scale * x[0], scale * x[1], scale * x[2])
}

/// One classical four-stage Runge-Kutta step of `ẋ = deriv(x, t)`.
pub fn rk4_step<F>(mut deriv: F, x: &State, t: f64, dt: f64) -> Result<State, DynamicsError>
where
    F: FnMut(&Vec6, f64) -> Vec6,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let x0 = &x.0;
    let half = 0.5 * dt;
    let k1 = checked(deriv(x0, t), t)?;
    let k2 = checked(deriv(&(x0 + k1 * half), t + half), t + half)?;
    let k3 = checked(deriv(&(x0 + k2 * half), t + half), t + half)?;
    let k4 = checked(deriv(&(x0 + k3 * dt), t + dt), t + dt)?;
    let next = x0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|c| c.is_finite()) {
        Ok(State(next))
    } else {
        Err(DynamicsError::NonFinite { t: t + dt })
    }
}

fn checked(k: Vec6, t: f64) -> Result<Vec6, DynamicsError> {
    if k.iter().all(|c| c.is_finite()) {
        Ok(k)
    } else {
        Err(DynamicsError::NonFinite { t })
    }
}

/// Advances the perturbed plant `ẋ = Ax + Bu + d(x, t)` by one step with `u` held constant.
/// The residual is re-evaluated at every RK4 stage.
pub fn true_step(
    x: &State,
    u: &ControlInput,
    kind: ResidualKind,
    t: f64,
    dt: f64,
) -> Result<State, DynamicsError> {
    rk4_step(|y, s| nominal_vec(y, u) + residual_vec(kind, y, s), x, t, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn di(u: Vec3) -> impl FnMut(&Vec6, f64) -> Vec6 {
        move |y, _| nominal_vec(y, &u)
    }

    #[test]
    fn nominal_matches_block_structure() {
        let zero = nominal_derivative(&State::zeros(), &Vec3::zeros());
        assert_eq!(zero, Vec6::zeros());

        let x = State::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0));
        let d = nominal_derivative(&x, &Vec3::zeros());
        assert_eq!(d, Vec6::new(4.0, 5.0, 6.0, 0.0, 0.0, 0.0));

        let d = nominal_derivative(&State::zeros(), &Vec3::new(1.0, 0.0, -1.0));
        assert_eq!(d, Vec6::new(0.0, 0.0, 0.0, 1.0, 0.0, -1.0));

        // Same thing through the explicit A, B matrices.
        let a = nominal_a();
        assert_eq!(a * x.0, Vec6::new(4.0, 5.0, 6.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn residual_field_values() {
        let x = State::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let d = true_residual(ResidualKind::Attractive(0.4), &x, 3.7);
        assert_eq!(d, Vec6::new(0.0, 0.0, 0.0, -0.4, 0.0, 0.0));

        let d = true_residual(ResidualKind::TimeVarying(1.0), &x, std::f64::consts::FRAC_PI_2);
        assert!(close(d[3], 1.0, 1e-15));
        assert_eq!(d[4], 0.0);

        let origin = State::new(Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0));
        for kind in [
            ResidualKind::None,
            ResidualKind::Attractive(0.4),
            ResidualKind::Repulsive(0.4),
            ResidualKind::TimeVarying(1.0),
        ] {
            assert_eq!(true_residual(kind, &origin, 0.3), Vec6::zeros());
        }
    }

    #[test]
    fn time_varying_vanishes_at_multiples_of_pi() {
        let x = State::new(Vec3::new(1.5, -2.0, 0.5), Vec3::zeros());
        for n in 0..5 {
            // sin(nπ) in floating point is ~1e-16, not exactly zero.
            let d = true_residual(ResidualKind::TimeVarying(1.0), &x, n as f64 * std::f64::consts::PI);
            assert!(d.norm() < 1e-14, "n = {n}: {d}");
        }
    }

    #[test]
    fn rk4_matches_closed_form_double_integrator() {
        let x = State::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let next = rk4_step(di(Vec3::zeros()), &x, 0.0, 0.01).unwrap();
        assert_eq!(next, x);

        let x = State::new(Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let next = rk4_step(di(Vec3::zeros()), &x, 0.0, 0.01).unwrap();
        assert!(close(next.0[0], 1.01, 1e-15));
        assert!(close(next.0[3], 1.0, 1e-15));

        let next = rk4_step(di(Vec3::new(2.0, 0.0, 0.0)), &x, 0.0, 0.01).unwrap();
        assert!(close(next.0[0], 1.0101, 1e-15));
        assert!(close(next.0[3], 1.02, 1e-15));
    }

    #[test]
    fn rk4_rejects_bad_input() {
        let x = State::zeros();
        assert!(matches!(rk4_step(di(Vec3::zeros()), &x, 0.0, 0.0), Err(DynamicsError::InvalidStep(_))));
        assert!(matches!(rk4_step(di(Vec3::zeros()), &x, 0.0, -1.0), Err(DynamicsError::InvalidStep(_))));
        let bad = rk4_step(|_, _| Vec6::repeat(f64::NAN), &x, 0.0, 0.01);
        assert!(matches!(bad, Err(DynamicsError::NonFinite { .. })));
    }

    #[test]
    fn perturbed_step_signs_follow_euler() {
        let x = State::new(Vec3::new(1.0, 0.0, 0.0), Vec3::zeros());
        let u = Vec3::zeros();
        let dt = 1e-3;
        // Explicit Euler: v_x' = v_x + dt * (∓k r_x).
        let att = true_step(&x, &u, ResidualKind::Attractive(0.4), 0.0, dt).unwrap();
        assert!(att.0[3] < 0.0);
        assert!(close(att.0[3], -0.4 * dt, 1e-8));
        let rep = true_step(&x, &u, ResidualKind::Repulsive(0.4), 0.0, dt).unwrap();
        assert!(rep.0[3] > 0.0);
        assert!(close(rep.0[3], 0.4 * dt, 1e-8));

        let none = true_step(&x, &u, ResidualKind::None, 0.0, dt).unwrap();
        assert_eq!(none, rk4_step(di(u), &x, 0.0, dt).unwrap());
    }

    #[test]
    fn rk4_is_fourth_order() {
        // ẋ = Ax + B sin(t) e, integrated over [0, 1].
        let e = Vec3::new(1.0, -0.5, 0.25);
        let x0 = State::new(Vec3::new(0.3, 0.0, -0.2), Vec3::new(0.0, 1.0, 0.0));
        let integrate = |steps: usize| {
            let h = 1.0 / steps as f64;
            let mut x = x0;
            for i in 0..steps {
                let t = i as f64 * h;
                x = rk4_step(|y, s| nominal_vec(y, &(e * s.sin())), &x, t, h).unwrap();
            }
            x.0
        };
        let reference = integrate(4096);
        let err_h = (integrate(8) - reference).norm();
        let err_h2 = (integrate(16) - reference).norm();
        let ratio = err_h / err_h2;
        assert!(ratio >= 8.0 * 0.9, "convergence ratio {ratio}");
    }

    #[test]
    fn gains_validated() {
        assert!(ResidualKind::Attractive(-1.0).validate().is_err());
        assert!(ResidualKind::TimeVarying(1.0).validate().is_ok());
    }
}
