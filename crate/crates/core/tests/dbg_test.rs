use nalgebra::DVector;
use tdo_core::ocp::PrimalDualPoint;
use tdo_core::qp::{solve_qp, QpStatus};
use tdo_core::sqp::*;
use tdo_core::testkit::double_integrator_instance;

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
fn dbg_perturbed_soft_step() {
    let inst = double_integrator_instance(4, true);
    let x = DVector::from_vec(vec![0.7, 0.2]);
    let cfg_solve = SqpConfig::new(HessianMode::josephy_newton(), 1);
    let (z_star, _) =
        solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg_solve).unwrap();
    println!("z_star residual: {:.2e}", inst.natural_residual(&z_star, &x));
    let z0 = perturbed(&z_star, 5e-3, 0.9);
    let sub = build_subproblem(&inst, &z0, &x, &HessianMode::josephy_newton());
    let warm = inst.active_rows_at(&z0.w, 1e-9);
    println!("warm set: {warm:?}");
    println!("n_ineq = {}, kinds:", inst.dims.n_ineq);
    for delta in [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
        let mut s2 = sub.clone();
        s2.reg_delta = delta;
        match solve_qp(&s2, Some(&warm)) {
            Ok(sol) => println!(
                " delta={delta:e}: {:?} iters={} kkt={:.2e} active={:?}",
                sol.status, sol.iterations, sol.kkt_error, sol.active_set
            ),
            Err(e) => println!(" delta={delta:e}: ERR {e}"),
        }
        // also dense path for comparison
        let mut s3 = s2.clone();
        s3.structure = None;
        match solve_qp(&s3, Some(&warm)) {
            Ok(sol) => println!("   dense:    {:?} iters={} kkt={:.2e}", sol.status, sol.iterations, sol.kkt_error),
            Err(e) => println!("   dense:    ERR {e}"),
        }
        if delta > 0.0 { break; }
    }
}
