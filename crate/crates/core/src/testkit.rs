//! Small shared fixtures for tests and benches.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::LinearDynamics;
use crate::invariant_set::Polytope;
use crate::ocp::{OcpInstance, OcpSpec};

/// Sampled double integrator, dt = 0.1.
pub fn double_integrator() -> LinearDynamics {
    LinearDynamics::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.005, 0.1]),
    )
}

/// Toy optimal control instance on the double integrator. With `soft` the
/// position bound is softened with L1 slacks, otherwise all bounds are hard.
pub fn double_integrator_instance(horizon: usize, soft: bool) -> Arc<OcpInstance> {
    let spec = OcpSpec {
        horizon,
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(1, 1),
        x_lb: DVector::from_vec(vec![-5.0, -5.0]),
        x_ub: DVector::from_vec(vec![5.0, 5.0]),
        u_lb: DVector::from_vec(vec![-1.0]),
        u_ub: DVector::from_vec(vec![1.0]),
        soft_indices: if soft { vec![0] } else { vec![] },
        penalty_rho: 1e3,
    };
    Arc::new(
        OcpInstance::build(
            spec,
            Arc::new(double_integrator()),
            DMatrix::identity(2, 2),
            Polytope::empty(2),
        )
        .unwrap(),
    )
}
