//! Discrete dynamics interface used by the optimal control layer.

use nalgebra::{DMatrix, DVector};

use crate::model::{self, PlantState, VehicleParams, INPUT_DIM, STATE_DIM};

/// Nominal (disturbance-free) discrete-time model with exact Jacobians.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
}

/// The benchmark vehicle with d = 0.
#[derive(Clone, Debug)]
pub struct BicycleDynamics {
    pub params: VehicleParams,
}

impl BicycleDynamics {
    pub fn new(params: VehicleParams) -> Self {
        BicycleDynamics { params }
    }
}

fn to_state(x: &DVector<f64>) -> PlantState {
    let mut a = [0.0; STATE_DIM];
    a.copy_from_slice(x.as_slice());
    PlantState::from_array(a)
}

impl Dynamics for BicycleDynamics {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn input_dim(&self) -> usize {
        INPUT_DIM
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let next = model::step(&to_state(x), &[u[0], u[1]], 0.0, &self.params);
        DVector::from_row_slice(&next.as_array())
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = model::jacobians(&to_state(x), &[u[0], u[1]], &self.params);
        let am = DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| a[i][j]);
        let bm = DMatrix::from_fn(STATE_DIM, INPUT_DIM, |i, j| b[i][j]);
        (am, bm)
    }
}

/// Linear model `x+ = A x + B u`. Used by toy instances and tests.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(a.nrows(), b.nrows());
        LinearDynamics { a, b }
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
}
