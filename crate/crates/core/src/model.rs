//! Lateral bicycle dynamics of a sedan with a Pacejka tire model.
//!
//! State ordering is fixed everywhere: `[y, psi, nu, omega, delta_f, delta_r]`
//! (lateral position, yaw angle, lateral velocity, yaw rate, front and rear
//! steering angles). Inputs are the steering rates `[ddelta_f, ddelta_r]`.
//! Longitudinal speed is constant; the wind disturbance `d` enters the lateral
//! force balance only. Discretization is forward Euler with period `ts`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jet::{AdScalar, Jet};

pub const STATE_DIM: usize = 6;
pub const INPUT_DIM: usize = 2;

/// Seed dimension for model derivatives: six states plus two inputs.
const SEED: usize = STATE_DIM + INPUT_DIM;

const G_ACCEL: f64 = 9.81;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vehicle parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("friction coefficient must lie in (0, 1], got {0}")]
    BadFriction(f64),
}

/// Physical parameters. Defaults describe the benchmark sedan.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    /// Mass [kg].
    pub m: f64,
    /// Yaw inertia [kg m^2].
    pub izz: f64,
    /// CG to front axle [m].
    pub lf: f64,
    /// CG to rear axle [m].
    pub lr: f64,
    /// Friction coefficient.
    pub mu: f64,
    /// Pacejka stiffness factor B.
    pub b_tire: f64,
    /// Pacejka shape factor C.
    pub c_tire: f64,
    /// Lateral area [m^2].
    pub area: f64,
    /// Air density [kg/m^3].
    pub rho: f64,
    /// Lateral drag coefficient.
    pub cd: f64,
    /// Constant longitudinal velocity [m/s].
    pub s_long: f64,
    /// Sampling period [s].
    pub ts: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            m: 2041.0,
            izz: 4964.0,
            lf: 1.56,
            lr: 1.64,
            mu: 0.8,
            b_tire: 12.0,
            c_tire: 1.285,
            area: 7.8,
            rho: 1.225,
            cd: 1.5,
            s_long: 30.0,
            ts: 0.04,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            (self.m, "m"),
            (self.izz, "izz"),
            (self.lf, "lf"),
            (self.lr, "lr"),
            (self.b_tire, "b_tire"),
            (self.c_tire, "c_tire"),
            (self.area, "area"),
            (self.rho, "rho"),
            (self.cd, "cd"),
            (self.s_long, "s_long"),
            (self.ts, "ts"),
        ];
        for (v, name) in positive {
            if !(v > 0.0) {
                return Err(ModelError::NonPositive(name));
            }
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(ModelError::BadFriction(self.mu));
        }
        Ok(())
    }
}

/// Plant state `[y, psi, nu, omega, delta_f, delta_r]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub y: f64,
    pub psi: f64,
    pub nu: f64,
    pub omega: f64,
    pub delta_f: f64,
    pub delta_r: f64,
}

impl PlantState {
    pub fn zero() -> Self {
        PlantState::from_array([0.0; STATE_DIM])
    }

    pub fn from_array(x: [f64; STATE_DIM]) -> Self {
        PlantState {
            y: x[0],
            psi: x[1],
            nu: x[2],
            omega: x[3],
            delta_f: x[4],
            delta_r: x[5],
        }
    }

    pub fn as_array(&self) -> [f64; STATE_DIM] {
        [
            self.y,
            self.psi,
            self.nu,
            self.omega,
            self.delta_f,
            self.delta_r,
        ]
    }

    pub fn norm(&self) -> f64 {
        self.as_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Right-hand side of the equations of motion, generic over the scalar type.
fn dynamics_generic<S: AdScalar>(x: &[S; STATE_DIM], u: &[S; INPUT_DIM], d: f64, p: &VehicleParams) -> [S; STATE_DIM] {
    let s = S::constant(p.s_long);
    let [_y, psi, nu, omega, delta_f, delta_r] = *x;

    // Slip angles and Pacejka lateral tire force.
    let alpha_f = delta_f - ((nu + S::constant(p.lf) * omega) / s).atan();
    let alpha_r = delta_r - ((nu - S::constant(p.lr) * omega) / s).atan();
    let peak = S::constant(p.mu * G_ACCEL * p.m);
    let ff = peak * (S::constant(p.c_tire) * (S::constant(p.b_tire) * alpha_f).atan()).sin();
    let fr = peak * (S::constant(p.c_tire) * (S::constant(p.b_tire) * alpha_r).atan()).sin();

    // Lateral wind force: quadratic in wind speed, sign-preserving.
    let fw = S::constant(0.5 * p.rho * p.cd * p.area * d.abs() * d);

    let y_dot = s * psi.sin() + nu * psi.cos();
    let psi_dot = omega;
    let nu_dot = -(s * omega) + (ff * delta_f.cos() + fr * delta_r.cos() + fw) / S::constant(p.m);
    let omega_dot = (ff * delta_f.cos() * S::constant(p.lf) - fr * delta_r.cos() * S::constant(p.lr))
        / S::constant(p.izz);

    [y_dot, psi_dot, nu_dot, omega_dot, u[0], u[1]]
}

/// Continuous-time state derivative.
pub fn continuous_dynamics(
    x: &PlantState,
    u: &[f64; INPUT_DIM],
    d: f64,
    p: &VehicleParams,
) -> [f64; STATE_DIM] {
    dynamics_generic(&x.as_array(), u, d, p)
}

/// One forward-Euler step.
pub fn step(x: &PlantState, u: &[f64; INPUT_DIM], d: f64, p: &VehicleParams) -> PlantState {
    let f = continuous_dynamics(x, u, d, p);
    let xa = x.as_array();
    let mut next = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        next[i] = xa[i] + p.ts * f[i];
    }
    PlantState::from_array(next)
}

/// Exact Jacobians of [`step`] at `(x, u)` with nominal disturbance d = 0,
/// propagated through seeded jets.
pub fn jacobians(
    x: &PlantState,
    u: &[f64; INPUT_DIM],
    p: &VehicleParams,
) -> ([[f64; STATE_DIM]; STATE_DIM], [[f64; INPUT_DIM]; STATE_DIM]) {
    let xa = x.as_array();
    let mut xj = [Jet::<SEED>::constant(0.0); STATE_DIM];
    for i in 0..STATE_DIM {
        xj[i] = Jet::seeded(xa[i], i);
    }
    let uj = [
        Jet::<SEED>::seeded(u[0], STATE_DIM),
        Jet::<SEED>::seeded(u[1], STATE_DIM + 1),
    ];
    let f = dynamics_generic(&xj, &uj, 0.0, p);

    let mut a = [[0.0; STATE_DIM]; STATE_DIM];
    let mut b = [[0.0; INPUT_DIM]; STATE_DIM];
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            a[i][j] = p.ts * f[i].grad[j];
            if i == j {
                a[i][j] += 1.0;
            }
        }
        for j in 0..INPUT_DIM {
            b[i][j] = p.ts * f[i].grad[STATE_DIM + j];
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn origin_is_equilibrium() {
        let f = continuous_dynamics(&PlantState::zero(), &[0.0, 0.0], 0.0, &params());
        assert!(f.iter().all(|v| *v == 0.0));
        let next = step(&PlantState::zero(), &[0.0, 0.0], 0.0, &params());
        assert_eq!(next.norm(), 0.0);
    }

    #[test]
    fn wind_enters_lateral_acceleration_only() {
        let p = params();
        let f = continuous_dynamics(&PlantState::zero(), &[0.0, 0.0], 15.0, &p);
        let fw = 0.5 * 1.225 * 1.5 * 7.8 * 225.0;
        assert!((f[2] - fw / p.m).abs() < 1e-12);
        for (i, v) in f.iter().enumerate() {
            if i != 2 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn quarter_turn_heading_gives_longitudinal_speed_in_y() {
        let p = params();
        let mut x = PlantState::zero();
        x.psi = std::f64::consts::FRAC_PI_2;
        let f = continuous_dynamics(&x, &[0.0, 0.0], 0.0, &p);
        assert!((f[0] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn euler_update_of_steering_integrator() {
        let p = params();
        let next = step(&PlantState::zero(), &[1.2, 0.0], 0.0, &p);
        assert!((next.delta_f - 0.048).abs() < 1e-15);
        let mut rest = next.as_array();
        rest[4] = 0.0;
        assert!(rest.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_is_euler_of_continuous_dynamics() {
        let p = params();
        let x = PlantState::from_array([-1.2, 0.05, 0.4, -0.1, 0.02, -0.01]);
        let u = [0.3, -0.2];
        let d = 7.5;
        let f = continuous_dynamics(&x, &u, d, &p);
        let next = step(&x, &u, d, &p);
        let xa = x.as_array();
        let na = next.as_array();
        for i in 0..STATE_DIM {
            assert!((na[i] - (xa[i] + p.ts * f[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn step_is_bit_deterministic() {
        let p = params();
        let x = PlantState::from_array([-3.7, 0.01, 0.3, -0.02, 0.1, -0.03]);
        let u = [0.7, -0.4];
        let a = step(&x, &u, 3.25, &p);
        let b = step(&x, &u, 3.25, &p);
        assert_eq!(a.as_array(), b.as_array());
    }

    #[test]
    fn integrator_rows_of_jacobians() {
        let p = params();
        let (a, b) = jacobians(&PlantState::zero(), &[0.0, 0.0], &p);
        // delta_f, delta_r are pure integrators of the inputs.
        for i in [4usize, 5] {
            for j in 0..STATE_DIM {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(a[i][j], expect);
            }
        }
        assert_eq!(b[4][0], p.ts);
        assert_eq!(b[5][1], p.ts);
        assert_eq!(b[4][1], 0.0);
        assert_eq!(b[5][0], 0.0);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let p = params();
        let x = PlantState::from_array([-2.0, 0.05, 0.5, -0.08, 0.1, -0.02]);
        let u = [0.4, -0.1];
        let (a, b) = jacobians(&x, &u, &p);
        let h = 1e-6;
        for j in 0..STATE_DIM {
            let mut xp = x.as_array();
            let mut xm = x.as_array();
            xp[j] += h;
            xm[j] -= h;
            let fp = step(&PlantState::from_array(xp), &u, 0.0, &p).as_array();
            let fm = step(&PlantState::from_array(xm), &u, 0.0, &p).as_array();
            for i in 0..STATE_DIM {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!(
                    (a[i][j] - fd).abs() < 1e-6,
                    "A[{i}][{j}] = {} vs fd {}",
                    a[i][j],
                    fd
                );
            }
        }
        for j in 0..INPUT_DIM {
            let mut up = u;
            let mut um = u;
            up[j] += h;
            um[j] -= h;
            let fp = step(&x, &up, 0.0, &p).as_array();
            let fm = step(&x, &um, 0.0, &p).as_array();
            for i in 0..STATE_DIM {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((b[i][j] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn params_validation() {
        let mut p = params();
        assert!(p.validate().is_ok());
        p.mu = 1.4;
        assert!(matches!(p.validate(), Err(ModelError::BadFriction(_))));
        p.mu = 0.8;
        p.ts = 0.0;
        assert!(matches!(p.validate(), Err(ModelError::NonPositive("ts"))));
    }
}
