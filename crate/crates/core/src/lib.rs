//! Time-distributed optimization for nonlinear model predictive control.
//!
//! Instead of solving the optimal control problem to convergence at every
//! sampling instant, a fixed number of warmstarted SQP iterations is applied
//! per instant, turning the optimizer into a dynamic compensator coupled to
//! the plant. The crate provides:
//!
//! - the lateral bicycle benchmark plant with exact forward-mode derivatives
//!   ([`model`], [`jet`], [`dynamics`]);
//! - the parameterized optimal control problem in NLP form, its KKT system
//!   and natural residual ([`ocp`]);
//! - an active-set QP solver over stage-banded KKT factorizations ([`qp`])
//!   and the Gauss-Newton / exact-Hessian step engines ([`sqp`]);
//! - feedback laws and Riccati synthesis ([`controller`]), terminal-set
//!   construction ([`invariant_set`]);
//! - the closed-loop simulation harness with seeded gusts ([`sim`]),
//!   convergence-rate and small-gain diagnostics ([`diagnostics`]);
//! - configuration and file formats ([`config`], [`logio`]).
//!
//! Sweeps, grids, sampling checks, and rate probes parallelize through
//! [`par`]; disable the default `parallel` feature for a fully sequential
//! build.

pub mod config;
pub mod controller;
pub mod diagnostics;
pub mod dynamics;
pub mod invariant_set;
pub mod jet;
pub mod linalg;
pub mod logio;
pub mod model;
pub mod ocp;
pub mod par;
pub mod qp;
pub mod sim;
pub mod sqp;

#[doc(hidden)]
pub mod testkit;

pub use config::{build_setup, AppConfig, BenchmarkSetup};
pub use model::{PlantState, VehicleParams};
pub use ocp::{OcpInstance, PrimalDualPoint};
pub use sim::{run_scenario, ScenarioConfig, SimSetup};
pub use sqp::{HessianMode, SqpConfig};
