//! Hessian approximations and the finite-iteration step engine.
//!
//! A step solves one QP subproblem at the current iterate and replaces the
//! multipliers with the QP duals: `z+ = (w + dw, pi, eta)`. Running `ell`
//! such steps per sampling instant, warmstarted from the previous estimate,
//! turns the optimizer into a dynamic compensator; `ell = 1` with the
//! Gauss-Newton Hessian is the real-time iteration scheme.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ocp::{OcpInstance, PrimalDualPoint};
use crate::qp::{solve_qp, QpError, QpStatus, QpSubproblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianKind {
    GaussNewton,
    JosephyNewton,
    JnAugmented,
}

#[derive(Clone, Copy, Debug)]
pub struct HessianMode {
    pub kind: HessianKind,
    /// Augmentation weight, used by `JnAugmented`.
    pub rho_aug: f64,
    /// Central finite-difference step for second derivatives.
    pub fd_step: f64,
}

impl HessianMode {
    pub fn gauss_newton() -> Self {
        HessianMode {
            kind: HessianKind::GaussNewton,
            rho_aug: 0.0,
            fd_step: 1e-5,
        }
    }

    pub fn josephy_newton() -> Self {
        HessianMode {
            kind: HessianKind::JosephyNewton,
            rho_aug: 0.0,
            fd_step: 1e-5,
        }
    }

    pub fn jn_augmented(rho_aug: f64) -> Self {
        HessianMode {
            kind: HessianKind::JnAugmented,
            rho_aug,
            fd_step: 1e-5,
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            HessianKind::GaussNewton => "gn",
            HessianKind::JosephyNewton => "jn",
            HessianKind::JnAugmented => "jn-aug",
        }
    }
}

impl FromStr for HessianMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gn" | "gauss-newton" => Ok(HessianMode::gauss_newton()),
            "jn" | "josephy-newton" => Ok(HessianMode::josephy_newton()),
            "jn-aug" | "jn_aug" => Ok(HessianMode::jn_augmented(10.0)),
            other => Err(format!("unknown hessian mode `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SqpConfig {
    pub mode: HessianMode,
    /// Optimizer iterations per sampling instant.
    pub ell: usize,
    /// Starting value for the regularization ladder.
    pub reg_delta_floor: f64,
    /// Convergence tolerance for solve-to-optimality.
    pub kkt_tol: f64,
}

impl SqpConfig {
    pub fn new(mode: HessianMode, ell: usize) -> Self {
        SqpConfig {
            mode,
            ell,
            reg_delta_floor: 0.0,
            kkt_tol: 1e-8,
        }
    }

    /// Gauss-Newton with a single iteration per instant.
    pub fn rti() -> Self {
        SqpConfig::new(HessianMode::gauss_newton(), 1)
    }

    pub fn validate(&self) -> Result<(), SqpError> {
        if self.ell < 1 {
            return Err(SqpError::BadConfig("ell must be at least 1"));
        }
        if !(self.kkt_tol > 0.0) {
            return Err(SqpError::BadConfig("kkt_tol must be positive"));
        }
        if self.reg_delta_floor < 0.0 {
            return Err(SqpError::BadConfig("reg_delta_floor must be nonnegative"));
        }
        if self.mode.kind == HessianKind::JnAugmented && !(self.mode.rho_aug > 0.0) {
            return Err(SqpError::BadConfig("rho_aug must be positive for jn-aug"));
        }
        if !(self.mode.fd_step > 0.0) {
            return Err(SqpError::BadConfig("fd_step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SqpError {
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
    #[error("QP subproblem infeasible: linearized constraints inconsistent")]
    QpInfeasible,
    #[error("QP active-set iteration hit its cap")]
    QpMaxIter,
    #[error("KKT factorization singular for every regularization value tried")]
    RegularizationExhausted,
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        partial_trace: Vec<f64>,
        #[source]
        source: Box<SqpError>,
    },
}

/// Diagnostics for one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub pi_before: f64,
    pub pi_after: f64,
    pub reg_delta: f64,
    pub active_set: Vec<usize>,
    pub qp_iterations: usize,
}

/// Block-diagonal least-squares Hessian: Q on the states, R on the inputs,
/// Qf on the terminal state, zero on the penalty slacks. Independent of the
/// linearization point.
pub fn gn_hessian(inst: &OcpInstance) -> DMatrix<f64> {
    let lay = &inst.layout;
    let p = inst.dims.n_primal;
    let n = lay.horizon;
    let mut b = DMatrix::zeros(p, p);
    for i in 1..n {
        let r = lay.xi_range(i);
        b.view_mut((r.start, r.start), (lay.nx, lay.nx))
            .copy_from(&inst.spec.q);
    }
    for i in 0..n {
        let r = lay.mu_range(i);
        b.view_mut((r.start, r.start), (lay.nu, lay.nu))
            .copy_from(&inst.spec.r);
    }
    let r = lay.xi_range(n);
    b.view_mut((r.start, r.start), (lay.nx, lay.nx))
        .copy_from(&inst.qf);
    b
}

/// Exact-to-finite-differences Lagrangian Hessian: column `j` is the central
/// difference of the derivative-propagated gradient of L. Columns of the
/// penalty slacks vanish because L is affine in them. `JnAugmented` adds
/// `rho_aug * (grad g)' (grad g)`.
pub fn jn_hessian(
    inst: &OcpInstance,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    mode: &HessianMode,
) -> DMatrix<f64> {
    let lay = &inst.layout;
    let p = inst.dims.n_primal;
    let n = lay.horizon;
    let h = mode.fd_step;
    let mut jacs = inst.stage_jacobians(&z.w, x);
    let mut b = DMatrix::zeros(p, p);
    let mut w_pert = z.w.clone();

    for c in 0..p {
        let g = lay.stage_of_col(c);
        let is_slack = g >= 1 && lay.slack_range(g).contains(&c);
        if is_slack {
            continue;
        }
        // Which defect's Jacobians move with this column.
        let refresh = if g == 0 {
            Some(0)
        } else if lay.xi_range(g).contains(&c) {
            if g <= n - 1 {
                Some(g)
            } else {
                None
            }
        } else {
            Some(g)
        };

        w_pert[c] = z.w[c] + h;
        if let Some(s) = refresh {
            inst.refresh_stage_jacobian(&mut jacs, &w_pert, x, s);
        }
        let g_plus = inst.grad_lagrangian(&w_pert, &z.lam, &z.v, &jacs);

        w_pert[c] = z.w[c] - h;
        if let Some(s) = refresh {
            inst.refresh_stage_jacobian(&mut jacs, &w_pert, x, s);
        }
        let g_minus = inst.grad_lagrangian(&w_pert, &z.lam, &z.v, &jacs);

        w_pert[c] = z.w[c];
        if let Some(s) = refresh {
            inst.refresh_stage_jacobian(&mut jacs, &w_pert, x, s);
        }

        let col = (g_plus - g_minus) / (2.0 * h);
        b.column_mut(c).copy_from(&col);
    }

    // The Lagrangian separates by stage group, so cross-group entries are
    // exactly zero; wipe the finite-difference noise there, which would
    // otherwise destroy the bandedness of the KKT systems.
    for ci in 0..p {
        let gi = lay.stage_of_col(ci);
        for cj in 0..p {
            if lay.stage_of_col(cj) != gi {
                b[(ci, cj)] = 0.0;
            }
        }
    }

    // Symmetrize.
    let bt = b.transpose();
    b = (b + bt) * 0.5;

    if mode.kind == HessianKind::JnAugmented {
        let eq = inst.eq_jacobian(&jacs);
        for row in &eq.rows {
            for &(c1, v1) in row {
                for &(c2, v2) in row {
                    b[(c1, c2)] += mode.rho_aug * v1 * v2;
                }
            }
        }
    }
    b
}

/// Assemble the QP data of one Newton-type step at `z`.
pub fn build_subproblem(
    inst: &OcpInstance,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    mode: &HessianMode,
) -> QpSubproblem {
    let hess = match mode.kind {
        HessianKind::GaussNewton => gn_hessian(inst),
        HessianKind::JosephyNewton | HessianKind::JnAugmented => jn_hessian(inst, z, x, mode),
    };
    let jacs = inst.stage_jacobians(&z.w, x);
    QpSubproblem {
        hess,
        grad: inst.objective_grad(&z.w),
        eq_jac: inst.eq_jacobian(&jacs),
        eq_rhs: inst.eval_defects(&z.w, x),
        ineq_jac: inst.ineq_rows().clone(),
        ineq_rhs: inst.eval_ineq(&z.w),
        reg_delta: 0.0,
        structure: Some(inst.stage_structure()),
    }
}

fn regularization_ladder(floor: f64) -> Vec<f64> {
    let mut ladder = vec![floor];
    for d in [1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
        if d > floor {
            ladder.push(d);
        }
    }
    ladder
}

/// One optimizer step: build the subproblem at `z`, solve it, and apply the
/// full-multiplier update. The regularization ladder is climbed only when
/// the factorization reports a singular or cycling system.
pub fn td_step(
    inst: &OcpInstance,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    cfg: &SqpConfig,
    warm: Option<&[usize]>,
) -> Result<(PrimalDualPoint, StepReport), SqpError> {
    let pi_before = inst.natural_residual(z, x);
    let mut sub = build_subproblem(inst, z, x, &cfg.mode);
    let warm_set: Vec<usize> = match warm {
        Some(w) => w.to_vec(),
        None => {
            // Rows active at the primal point, plus rows the duals mark as
            // binding (after a perturbation the penalty slacks sit at
            // h < 0 but still carry their multipliers).
            let mut set = inst.active_rows_at(&z.w, 1e-9);
            for i in 0..z.v.len() {
                if z.v[i] > 1e-8 {
                    set.push(i);
                }
            }
            set.sort_unstable();
            set.dedup();
            set
        }
    };

    let mut saw_max_iter = false;
    for delta in regularization_ladder(cfg.reg_delta_floor) {
        sub.reg_delta = delta;
        match solve_qp(&sub, Some(&warm_set)) {
            Ok(sol) => match sol.status {
                QpStatus::Solved => {
                    let z_next = PrimalDualPoint {
                        w: &z.w + &sol.dw,
                        lam: sol.pi,
                        v: sol.eta,
                    };
                    let pi_after = inst.natural_residual(&z_next, x);
                    return Ok((
                        z_next,
                        StepReport {
                            pi_before,
                            pi_after,
                            reg_delta: delta,
                            active_set: sol.active_set,
                            qp_iterations: sol.iterations,
                        },
                    ));
                }
                QpStatus::Infeasible => return Err(SqpError::QpInfeasible),
                QpStatus::MaxIter => {
                    saw_max_iter = true;
                    continue;
                }
            },
            Err(QpError::SingularKkt) => continue,
            Err(QpError::Dimension(m)) => {
                panic!("subproblem dimension mismatch: {m}");
            }
        }
    }
    if saw_max_iter {
        Err(SqpError::QpMaxIter)
    } else {
        Err(SqpError::RegularizationExhausted)
    }
}

/// Result of `ell` chained steps.
#[derive(Clone, Debug)]
pub struct IterateOutcome {
    pub z: PrimalDualPoint,
    /// Natural residuals: entry 0 is the residual of the warmstart, entry
    /// `k` the residual after step `k`.
    pub residual_trace: Vec<f64>,
    pub reports: Vec<StepReport>,
}

impl IterateOutcome {
    pub fn final_active_set(&self) -> Option<&[usize]> {
        self.reports.last().map(|r| r.active_set.as_slice())
    }
}

/// Apply `cfg.ell` steps, threading active-set warmstarts between them.
pub fn iterate(
    inst: &OcpInstance,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    cfg: &SqpConfig,
    warm: Option<&[usize]>,
) -> Result<IterateOutcome, SqpError> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.ell + 1);
    let mut reports = Vec::with_capacity(cfg.ell);
    let mut cur = z.clone();
    let mut warm_set: Option<Vec<usize>> = warm.map(|w| w.to_vec());
    for step in 0..cfg.ell {
        let res = td_step(inst, &cur, x, cfg, warm_set.as_deref());
        match res {
            Ok((z_next, report)) => {
                if step == 0 {
                    trace.push(report.pi_before);
                }
                trace.push(report.pi_after);
                warm_set = Some(report.active_set.clone());
                reports.push(report);
                cur = z_next;
            }
            Err(e) => {
                return Err(SqpError::StepFailed {
                    step,
                    partial_trace: trace,
                    source: Box::new(e),
                });
            }
        }
    }
    Ok(IterateOutcome {
        z: cur,
        residual_trace: trace,
        reports,
    })
}

/// Iterate single steps until the natural residual drops below
/// `cfg.kkt_tol`. Returns the solution and the number of steps used.
pub fn solve_to_tolerance(
    inst: &OcpInstance,
    z0: &PrimalDualPoint,
    x: &DVector<f64>,
    cfg: &SqpConfig,
) -> Result<(PrimalDualPoint, usize), SqpError> {
    const CAP: usize = 200;
    const STALL_WINDOW: usize = 10;
    let mut z = z0.clone();
    let mut warm: Option<Vec<usize>> = None;
    let mut best = f64::INFINITY;
    let mut stalled = 0usize;
    let mut residual = inst.natural_residual(&z, x);
    for it in 0..CAP {
        if residual <= cfg.kkt_tol {
            return Ok((z, it));
        }
        let (z_next, report) = td_step(inst, &z, x, cfg, warm.as_deref())?;
        warm = Some(report.active_set.clone());
        z = z_next;
        residual = report.pi_after;
        if residual < best * (1.0 - 1e-12) {
            best = residual;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= STALL_WINDOW {
                return Err(SqpError::NoConvergence {
                    iterations: it + 1,
                    residual,
                });
            }
        }
    }
    if residual <= cfg.kkt_tol {
        Ok((z, CAP))
    } else {
        Err(SqpError::NoConvergence {
            iterations: CAP,
            residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::double_integrator_instance;

    fn perturbed(z: &PrimalDualPoint, scale: f64, phase: f64) -> PrimalDualPoint {
        let mut out = z.clone();
        for i in 0..out.w.len() {
            out.w[i] += scale * ((i as f64) * 1.7 + phase).sin();
        }
        for i in 0..out.lam.len() {
            out.lam[i] += scale * ((i as f64) * 0.9 + phase).cos();
        }
        for i in 0..out.v.len() {
            out.v[i] += scale * ((i as f64) * 0.4 + phase).sin().abs();
        }
        out
    }

    #[test]
    fn config_validation_rejects_zero_ell() {
        let mut cfg = SqpConfig::rti();
        cfg.ell = 0;
        assert!(matches!(cfg.validate(), Err(SqpError::BadConfig(_))));
    }

    #[test]
    fn gn_hessian_is_constant_and_psd() {
        let inst = double_integrator_instance(4, true);
        let b = gn_hessian(&inst);
        assert_eq!(b, b.transpose());
        let min_eig = nalgebra::SymmetricEigen::new(b.clone()).eigenvalues.min();
        assert!(min_eig >= -1e-12);
    }

    #[test]
    fn jn_matches_exact_hessian_on_linear_quadratic() {
        // Linear dynamics and quadratic objective: the Lagrangian Hessian is
        // the constant block-diagonal weight matrix.
        let inst = double_integrator_instance(3, false);
        let x = nalgebra::DVector::from_vec(vec![0.4, -0.2]);
        let z = perturbed(&PrimalDualPoint::zeros(&inst.dims), 0.1, 0.3);
        let b = jn_hessian(&inst, &z, &x, &HessianMode::josephy_newton());
        let exact = gn_hessian(&inst);
        assert!((&b - &exact).amax() < 1e-6);
        assert_eq!(b, b.transpose());
    }

    #[test]
    fn jn_augmented_adds_psd_term() {
        let inst = double_integrator_instance(3, false);
        let x = nalgebra::DVector::from_vec(vec![0.4, -0.2]);
        let z = PrimalDualPoint::zeros(&inst.dims);
        let plain = jn_hessian(&inst, &z, &x, &HessianMode::josephy_newton());
        let aug = jn_hessian(&inst, &z, &x, &HessianMode::jn_augmented(5.0));
        let diff = aug - plain;
        let min_eig = nalgebra::SymmetricEigen::new(diff).eigenvalues.min();
        assert!(min_eig >= -1e-9);
    }

    #[test]
    fn td_step_fixed_point_all_modes() {
        let inst = double_integrator_instance(4, true);
        let x = nalgebra::DVector::from_vec(vec![0.8, -0.3]);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let (z_star, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg).unwrap();
        for mode in [
            HessianMode::gauss_newton(),
            HessianMode::josephy_newton(),
            HessianMode::jn_augmented(5.0),
        ] {
            let step_cfg = SqpConfig::new(mode, 1);
            let (z_next, _) = td_step(&inst, &z_star, &x, &step_cfg, None).unwrap();
            let drift = (&z_next.w - &z_star.w).amax().max(
                (&z_next.lam - &z_star.lam)
                    .amax()
                    .max((&z_next.v - &z_star.v).amax()),
            );
            assert!(drift <= 1e-7, "mode {} drift {drift:.3e}", mode.label());
        }
    }

    #[test]
    fn one_newton_step_is_exact_on_linear_quadratic() {
        let inst = double_integrator_instance(3, false);
        let x = nalgebra::DVector::from_vec(vec![0.5, 0.1]);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let (z_star, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg).unwrap();
        let z0 = perturbed(&z_star, 1e-3, 0.2);
        let (z1, _) = td_step(&inst, &z0, &x, &cfg, None).unwrap();
        assert!(inst.natural_residual(&z1, &x) <= 1e-9);
    }

    #[test]
    fn ell_one_iterate_equals_single_step() {
        let inst = double_integrator_instance(3, true);
        let x = nalgebra::DVector::from_vec(vec![0.6, -0.1]);
        let cfg = SqpConfig::rti();
        let z0 = PrimalDualPoint::zeros(&inst.dims);
        let (z_step, rep) = td_step(&inst, &z0, &x, &cfg, None).unwrap();
        let out = iterate(&inst, &z0, &x, &cfg, None).unwrap();
        assert_eq!(out.z, z_step);
        assert_eq!(out.residual_trace.len(), 2);
        assert!((out.residual_trace[1] - rep.pi_after).abs() < 1e-15);
    }

    #[test]
    fn residual_trace_monotone_within_basin() {
        let inst = double_integrator_instance(4, true);
        let x = nalgebra::DVector::from_vec(vec![0.7, 0.2]);
        let cfg_solve = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let (z_star, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg_solve).unwrap();
        let z0 = perturbed(&z_star, 5e-3, 0.9);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 4);
        let out = iterate(&inst, &z0, &x, &cfg, None).unwrap();
        for k in 1..out.residual_trace.len() {
            assert!(
                out.residual_trace[k] <= out.residual_trace[k - 1] * (1.0 + 1e-9)
                    || out.residual_trace[k] < 1e-10
            );
        }
    }

    #[test]
    fn solve_from_solution_costs_no_iterations() {
        let inst = double_integrator_instance(3, true);
        let x = nalgebra::DVector::from_vec(vec![0.3, 0.0]);
        let cfg = SqpConfig::new(HessianMode::gauss_newton(), 1);
        let (z_star, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg).unwrap();
        let (_, iters) = solve_to_tolerance(&inst, &z_star, &x, &cfg).unwrap();
        assert_eq!(iters, 0);
    }

    #[test]
    fn gn_and_jn_agree_at_tolerance() {
        let inst = double_integrator_instance(4, true);
        let x = nalgebra::DVector::from_vec(vec![0.9, -0.4]);
        let z0 = PrimalDualPoint::zeros(&inst.dims);
        let (z_gn, _) =
            solve_to_tolerance(&inst, &z0, &x, &SqpConfig::new(HessianMode::gauss_newton(), 1))
                .unwrap();
        let (z_jn, _) =
            solve_to_tolerance(&inst, &z0, &x, &SqpConfig::new(HessianMode::josephy_newton(), 1))
                .unwrap();
        assert!((&z_gn.w - &z_jn.w).amax() < 1e-6);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            HessianMode::from_str("gn").unwrap().kind,
            HessianKind::GaussNewton
        );
        assert_eq!(
            HessianMode::from_str("jn").unwrap().kind,
            HessianKind::JosephyNewton
        );
        assert!(HessianMode::from_str("bogus").is_err());
    }
}
