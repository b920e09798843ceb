//! Feedback laws: the optimizer-in-the-loop compensator, fully converged
//! MPC, and an LQR baseline synthesized from the discrete Riccati equation.

use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::Dynamics;
use crate::ocp::{OcpInstance, PrimalDualPoint};
use crate::sqp::{iterate, solve_to_tolerance, SqpConfig, SqpError, StepReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    Cold,
    Presolve,
}

impl FromStr for InitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cold" => Ok(InitStrategy::Cold),
            "presolve" => Ok(InitStrategy::Presolve),
            other => Err(format!("unknown init strategy `{other}`")),
        }
    }
}

/// Initial compensator state: all zeros, or a full solve at `x0`.
pub fn initialize(
    inst: &OcpInstance,
    x0: &DVector<f64>,
    strategy: InitStrategy,
    cfg: &SqpConfig,
) -> Result<PrimalDualPoint, SqpError> {
    match strategy {
        InitStrategy::Cold => Ok(PrimalDualPoint::zeros(&inst.dims)),
        InitStrategy::Presolve => {
            let z0 = PrimalDualPoint::zeros(&inst.dims);
            let (z, _) = solve_to_tolerance(inst, &z0, x0, cfg)?;
            Ok(z)
        }
    }
}

/// Componentwise clamp onto the input box; reports whether it bit.
pub fn clamp_input(u: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> (DVector<f64>, bool) {
    let mut out = u.clone();
    let mut clamped = false;
    for i in 0..u.len() {
        let c = u[i].clamp(lb[i], ub[i]);
        if c != u[i] {
            clamped = true;
        }
        out[i] = c;
    }
    (out, clamped)
}

#[derive(Clone, Debug)]
pub struct ControlOutcome {
    pub u: DVector<f64>,
    pub clamped: bool,
    /// True when the compensator state was held because the step failed.
    pub held: bool,
    pub report: Option<StepReport>,
    pub event: Option<String>,
}

/// Dynamic compensator: carries the solution estimate `z` across sampling
/// instants, improves it with `ell` optimizer iterations per call, and
/// extracts the first input.
pub struct TdoController {
    pub inst: Arc<OcpInstance>,
    pub cfg: SqpConfig,
    pub z: PrimalDualPoint,
    warm: Option<Vec<usize>>,
}

impl TdoController {
    pub fn new(inst: Arc<OcpInstance>, cfg: SqpConfig, z0: PrimalDualPoint) -> Self {
        TdoController {
            inst,
            cfg,
            z: z0,
            warm: None,
        }
    }

    pub fn control(&mut self, x: &DVector<f64>) -> ControlOutcome {
        match iterate(&self.inst, &self.z, x, &self.cfg, self.warm.as_deref()) {
            Ok(out) => {
                self.warm = out.final_active_set().map(|s| s.to_vec());
                self.z = out.z;
                let raw = self.inst.extract_u0(&self.z);
                let (u, clamped) =
                    clamp_input(&raw, &self.inst.spec.u_lb, &self.inst.spec.u_ub);
                // Collapse the per-step reports into one per-instant row:
                // residual entering the instant, residual leaving it, the
                // largest regularization used, the final active set.
                let report = out.reports.last().map(|last| StepReport {
                    pi_before: out.reports[0].pi_before,
                    pi_after: last.pi_after,
                    reg_delta: out
                        .reports
                        .iter()
                        .map(|r| r.reg_delta)
                        .fold(0.0, f64::max),
                    active_set: last.active_set.clone(),
                    qp_iterations: out.reports.iter().map(|r| r.qp_iterations).sum(),
                });
                ControlOutcome {
                    u,
                    clamped,
                    held: false,
                    report,
                    event: None,
                }
            }
            Err(e) => {
                // No recovery prescription exists for a failed subproblem:
                // hold the estimate, apply its (clamped) input, flag loudly.
                let raw = self.inst.extract_u0(&self.z);
                let (u, _) = clamp_input(&raw, &self.inst.spec.u_lb, &self.inst.spec.u_ub);
                ControlOutcome {
                    u,
                    clamped: true,
                    held: true,
                    report: None,
                    event: Some(format!("step failed, holding estimate: {e}")),
                }
            }
        }
    }
}

/// Fully converged MPC playing the role of the ideal feedback; also serves
/// as the oracle for the suboptimality error signal.
pub struct OptimalMpc {
    pub inst: Arc<OcpInstance>,
    pub cfg: SqpConfig,
    pub z: PrimalDualPoint,
}

impl OptimalMpc {
    pub fn new(inst: Arc<OcpInstance>, cfg: SqpConfig, z0: PrimalDualPoint) -> Self {
        OptimalMpc { inst, cfg, z: z0 }
    }

    /// Solve to tolerance from the running warmstart; returns the input and
    /// the iterations used.
    pub fn control(&mut self, x: &DVector<f64>) -> Result<(DVector<f64>, usize), SqpError> {
        let (z, iters) = solve_to_tolerance(&self.inst, &self.z, x, &self.cfg)?;
        self.z = z;
        let raw = self.inst.extract_u0(&self.z);
        let (u, _) = clamp_input(&raw, &self.inst.spec.u_lb, &self.inst.spec.u_ub);
        Ok((u, iters))
    }
}

#[derive(Debug, Error)]
pub enum DareError {
    #[error("Riccati recursion diverged; the pair (A, B) appears non-stabilizable")]
    NonStabilizable,
    #[error("Riccati recursion failed to converge")]
    NoConvergence,
}

/// Fixed point of the discrete algebraic Riccati equation by iterating the
/// recursion to convergence. Returns (P, K) with `u = -K x`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DareError> {
    let mut p = q.clone();
    let at = a.transpose();
    let bt = b.transpose();
    let mut converged = false;
    for _ in 0..100_000 {
        let s = r + &bt * &p * b;
        let s_inv = s.try_inverse().ok_or(DareError::NonStabilizable)?;
        let pn = &at * &p * a - &at * &p * b * &s_inv * &bt * &p * a + q;
        let diff = (&pn - &p).amax();
        p = pn;
        if p.amax() > 1e14 {
            return Err(DareError::NonStabilizable);
        }
        if diff < 1e-13 * (1.0 + p.amax()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DareError::NoConvergence);
    }
    let s = r + &bt * &p * b;
    let s_inv = s.try_inverse().ok_or(DareError::NonStabilizable)?;
    let k = s_inv * &bt * &p * a;
    Ok((p, k))
}

/// || P - (A'PA - A'PB (R + B'PB)^-1 B'PA + Q) ||_max
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let at = a.transpose();
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let s_inv = match s.try_inverse() {
        Some(m) => m,
        None => return f64::INFINITY,
    };
    let rhs = &at * p * a - &at * p * b * &s_inv * &bt * p * a + q;
    (p - rhs).amax()
}

/// Static linear feedback `u = -K x` with input clamping.
pub struct LqrController {
    pub gain: DMatrix<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
}

impl LqrController {
    /// Gain from the DARE at the origin linearization of the dynamics.
    pub fn from_dynamics(
        dynamics: &dyn Dynamics,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        u_lb: DVector<f64>,
        u_ub: DVector<f64>,
    ) -> Result<Self, DareError> {
        let x0 = DVector::zeros(dynamics.state_dim());
        let u0 = DVector::zeros(dynamics.input_dim());
        let (a, b) = dynamics.jacobians(&x0, &u0);
        let (_, gain) = dare_solve(&a, &b, q, r)?;
        Ok(LqrController { gain, u_lb, u_ub })
    }

    pub fn control(&self, x: &DVector<f64>) -> (DVector<f64>, bool) {
        let raw = -(&self.gain * x);
        clamp_input(&raw, &self.u_lb, &self.u_ub)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::BicycleDynamics;
    use crate::invariant_set::spectral_radius;
    use crate::model::VehicleParams;
    use crate::sqp::HessianMode;
    use crate::testkit::double_integrator_instance;

    #[test]
    fn dare_deadbeat_case() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let (p, k) = dare_solve(&a, &b, &q, &r).unwrap();
        assert!((p - q).amax() < 1e-12);
        assert!(k.amax() < 1e-12);
    }

    #[test]
    fn dare_scalar_golden_ratio() {
        // a = b = q = r = 1: p = 1 + p - p^2/(1+p)  =>  p^2 = 1 + p.
        let one = DMatrix::from_row_slice(1, 1, &[1.0]);
        let (p, _) = dare_solve(&one, &one, &one, &one).unwrap();
        let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - golden).abs() < 1e-10);
    }

    #[test]
    fn dare_residual_small() {
        let dynamics = BicycleDynamics::new(VehicleParams::default());
        let x0 = DVector::zeros(6);
        let u0 = DVector::zeros(2);
        let (a, b) = dynamics.jacobians(&x0, &u0);
        let q = DMatrix::identity(6, 6);
        let r = DMatrix::identity(2, 2);
        let (p, k) = dare_solve(&a, &b, &q, &r).unwrap();
        assert!(dare_residual(&a, &b, &q, &r, &p) <= 1e-10);
        // closed loop must be Schur stable
        let a_cl = &a - &b * &k;
        assert!(spectral_radius(&a_cl) < 1.0);
    }

    #[test]
    fn dare_rejects_non_stabilizable() {
        // unstable mode with no control authority
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(dare_solve(&a, &b, &q, &r).is_err());
    }

    #[test]
    fn lqr_zero_at_origin() {
        let dynamics = BicycleDynamics::new(VehicleParams::default());
        let q = DMatrix::identity(6, 6);
        let r = DMatrix::identity(2, 2);
        let lqr = LqrController::from_dynamics(
            &dynamics,
            &q,
            &r,
            DVector::from_vec(vec![-1.2, -0.6]),
            DVector::from_vec(vec![1.2, 0.6]),
        )
        .unwrap();
        let (u, clamped) = lqr.control(&DVector::zeros(6));
        assert!(u.amax() == 0.0);
        assert!(!clamped);
    }

    #[test]
    fn clamping_reports() {
        let lb = DVector::from_vec(vec![-1.0]);
        let ub = DVector::from_vec(vec![1.0]);
        let (u, c) = clamp_input(&DVector::from_vec(vec![2.0]), &lb, &ub);
        assert_eq!(u[0], 1.0);
        assert!(c);
        let (_, c2) = clamp_input(&DVector::from_vec(vec![0.5]), &lb, &ub);
        assert!(!c2);
    }

    #[test]
    fn origin_is_a_fixed_point_of_the_loop() {
        let inst = double_integrator_instance(4, true);
        let cfg = SqpConfig::rti();
        let mut ctrl = TdoController::new(
            inst.clone(),
            cfg,
            PrimalDualPoint::zeros(&inst.dims),
        );
        let x = DVector::zeros(2);
        let out = ctrl.control(&x);
        assert!(!out.held);
        assert!(out.u.amax() < 1e-12);
        // the compensator state stays at the origin-extended KKT point
        assert!(ctrl.z.w.amax() < 1e-12);
        let out2 = ctrl.control(&x);
        assert!(out2.u.amax() < 1e-12);
    }

    #[test]
    fn presolve_matches_tolerance_contract() {
        let inst = double_integrator_instance(4, true);
        let cfg = SqpConfig::new(HessianMode::gauss_newton(), 1);
        let x0 = DVector::from_vec(vec![0.9, -0.2]);
        let z = initialize(&inst, &x0, InitStrategy::Presolve, &cfg).unwrap();
        assert!(inst.natural_residual(&z, &x0) <= cfg.kkt_tol);
        let zc = initialize(&inst, &x0, InitStrategy::Cold, &cfg).unwrap();
        assert_eq!(zc.norm(), 0.0);
    }

    #[test]
    fn optimal_mpc_at_origin_returns_zero() {
        let inst = double_integrator_instance(3, true);
        let cfg = SqpConfig::new(HessianMode::gauss_newton(), 1);
        let mut opt = OptimalMpc::new(inst.clone(), cfg, PrimalDualPoint::zeros(&inst.dims));
        let (u, _) = opt.control(&DVector::zeros(2)).unwrap();
        assert!(u.amax() < 1e-10);
        assert!(inst.natural_residual(&opt.z, &DVector::zeros(2)) <= cfg.kkt_tol);
    }
}
