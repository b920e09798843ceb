//! One JSON configuration file covering plant parameters, problem setup,
//! and scenario defaults, plus assembly of the ready-to-run benchmark.
//!
//! Every field has a default (the benchmark values), so an empty `{}` file
//! is a complete configuration. Angles are in radians.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{dare_solve, DareError, InitStrategy};
use crate::dynamics::BicycleDynamics;
use crate::invariant_set::{max_admissible_set, InvariantSetError, MaxAdmissibleResult, Polytope};
use crate::model::{ModelError, VehicleParams, INPUT_DIM, STATE_DIM};
use crate::ocp::{OcpError, OcpInstance, OcpSpec};
use crate::sim::{ControllerKind, ControllerSpec, ScenarioConfig, SimSetup};
use crate::model::PlantState;
use crate::sqp::{HessianMode, SqpConfig};

const DEG: f64 = std::f64::consts::PI / 180.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OcpSettings {
    pub horizon: usize,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub x_lb: Vec<f64>,
    pub x_ub: Vec<f64>,
    pub u_lb: Vec<f64>,
    pub u_ub: Vec<f64>,
    pub soft_indices: Vec<usize>,
    pub penalty_rho: f64,
    /// Iteration cap for the terminal-set recursion.
    pub terminal_cap: usize,
}

impl Default for OcpSettings {
    fn default() -> Self {
        OcpSettings {
            horizon: 30,
            q_diag: vec![1.0; STATE_DIM],
            r_diag: vec![1.0; INPUT_DIM],
            x_lb: vec![-4.7, -7.0 * DEG, -100.0, -100.0, -35.0 * DEG, -4.0 * DEG],
            x_ub: vec![0.4, 7.0 * DEG, 100.0, 100.0, 35.0 * DEG, 4.0 * DEG],
            u_lb: vec![-1.2, -0.6],
            u_ub: vec![1.2, 0.6],
            soft_indices: vec![0, 1, 2, 3],
            penalty_rho: 1e3,
            terminal_cap: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSettings {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub gust_mean: f64,
    pub gust_std: f64,
    pub disturbance: bool,
    pub controller: String,
    pub mode: String,
    pub ell: usize,
    pub init: String,
    pub error_oracle: bool,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        ScenarioSettings {
            x0: vec![-3.7, 0.0, 0.0, 0.0, 0.0, 0.0],
            steps: 250,
            seed: 1,
            gust_mean: 15.0,
            gust_std: 5.0,
            disturbance: true,
            controller: "rti".to_string(),
            mode: "gn".to_string(),
            ell: 1,
            init: "presolve".to_string(),
            error_oracle: false,
        }
    }
}

/// Optional terminal ingredient files. When absent they are computed.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TerminalFiles {
    pub qf: Option<String>,
    pub a_mat: Option<String>,
    pub b_vec: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub vehicle: VehicleParams,
    pub ocp: OcpSettings,
    pub scenario: ScenarioSettings,
    pub terminal: TerminalFiles,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("vehicle parameters: {0}")]
    Model(#[from] ModelError),
    #[error("problem assembly: {0}")]
    Ocp(#[from] OcpError),
    #[error("terminal synthesis: {0}")]
    Dare(#[from] DareError),
    #[error("terminal set: {0}")]
    InvariantSet(#[from] InvariantSetError),
    #[error("bad setting: {0}")]
    Invalid(String),
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(values))
}

/// Everything needed to run scenarios: plant, assembled problem, and the
/// terminal ingredients used to build it.
pub struct BenchmarkSetup {
    pub params: VehicleParams,
    pub instance: Arc<OcpInstance>,
    pub qf: DMatrix<f64>,
    pub lqr_gain: DMatrix<f64>,
    pub a_cl: DMatrix<f64>,
    pub terminal: MaxAdmissibleResult,
}

impl BenchmarkSetup {
    pub fn into_sim_setup(self) -> SimSetup {
        SimSetup {
            params: self.params,
            instance: self.instance,
        }
    }

    pub fn sim_setup(&self) -> SimSetup {
        SimSetup {
            params: self.params.clone(),
            instance: Arc::clone(&self.instance),
        }
    }
}

/// Terminal cost from the Riccati fixed point at the origin linearization
/// and terminal set from the admissible-invariant-set recursion for the
/// resulting closed loop.
pub fn terminal_ingredients(
    params: &VehicleParams,
    ocp: &OcpSettings,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, MaxAdmissibleResult), ConfigError> {
    let dynamics = BicycleDynamics::new(params.clone());
    let x0 = DVector::zeros(STATE_DIM);
    let u0 = DVector::zeros(INPUT_DIM);
    let (a, b) = crate::dynamics::Dynamics::jacobians(&dynamics, &x0, &u0);
    let q = diag(&ocp.q_diag);
    let r = diag(&ocp.r_diag);
    let (qf, k) = dare_solve(&a, &b, &q, &r)?;
    let a_cl = &a - &b * &k;

    // State box uses the hard (unsoftened) bounds; inputs map through the
    // feedback gain: u = -K xi must respect the input box.
    let state_box = Polytope::from_box(
        &DVector::from_row_slice(&ocp.x_lb),
        &DVector::from_row_slice(&ocp.x_ub),
    );
    let mut input_rows = Polytope::empty(STATE_DIM);
    for j in 0..INPUT_DIM {
        let row: DVector<f64> = -k.row(j).transpose();
        input_rows.push_row(&row, ocp.u_ub[j]);
        input_rows.push_row(&(-&row), -ocp.u_lb[j]);
    }
    let terminal = max_admissible_set(&a_cl, &state_box, &input_rows, ocp.terminal_cap)?;
    Ok((qf, k, a_cl, terminal))
}

/// Build the full benchmark from a configuration: validates the plant,
/// computes or loads the terminal ingredients, and assembles the instance.
pub fn build_setup(cfg: &AppConfig) -> Result<BenchmarkSetup, ConfigError> {
    cfg.vehicle.validate()?;
    if cfg.ocp.q_diag.len() != STATE_DIM
        || cfg.ocp.x_lb.len() != STATE_DIM
        || cfg.ocp.x_ub.len() != STATE_DIM
    {
        return Err(ConfigError::Invalid("state-dimension settings must have 6 entries".into()));
    }
    if cfg.ocp.r_diag.len() != INPUT_DIM
        || cfg.ocp.u_lb.len() != INPUT_DIM
        || cfg.ocp.u_ub.len() != INPUT_DIM
    {
        return Err(ConfigError::Invalid("input-dimension settings must have 2 entries".into()));
    }

    let loaded = match (&cfg.terminal.qf, &cfg.terminal.a_mat, &cfg.terminal.b_vec) {
        (Some(qf_path), Some(a_path), Some(b_path)) => {
            let qf = crate::logio::read_matrix_text(Path::new(qf_path))
                .map_err(|e| ConfigError::Invalid(format!("qf file: {e}")))?;
            let a = crate::logio::read_matrix_text(Path::new(a_path))
                .map_err(|e| ConfigError::Invalid(format!("terminal A file: {e}")))?;
            let b = crate::logio::read_matrix_text(Path::new(b_path))
                .map_err(|e| ConfigError::Invalid(format!("terminal b file: {e}")))?;
            if b.ncols() != 1 {
                return Err(ConfigError::Invalid("terminal b must be a column".into()));
            }
            Some((qf, Polytope::new(a.clone(), b.column(0).into_owned())))
        }
        _ => None,
    };

    let dynamics = Arc::new(BicycleDynamics::new(cfg.vehicle.clone()));
    let x0 = DVector::zeros(STATE_DIM);
    let u0 = DVector::zeros(INPUT_DIM);
    let (a, b) = crate::dynamics::Dynamics::jacobians(dynamics.as_ref(), &x0, &u0);
    let q = diag(&cfg.ocp.q_diag);
    let r = diag(&cfg.ocp.r_diag);

    let (qf, lqr_gain, a_cl, terminal) = match loaded {
        Some((qf, poly)) => {
            let (_, k) = dare_solve(&a, &b, &q, &r)?;
            let a_cl = &a - &b * &k;
            (
                qf,
                k,
                a_cl,
                MaxAdmissibleResult {
                    set: poly,
                    iterations: 0,
                    certified: true,
                },
            )
        }
        None => {
            let (qf, k, a_cl, terminal) = terminal_ingredients(&cfg.vehicle, &cfg.ocp)?;
            (qf, k, a_cl, terminal)
        }
    };

    let spec = OcpSpec {
        horizon: cfg.ocp.horizon,
        q,
        r,
        x_lb: DVector::from_row_slice(&cfg.ocp.x_lb),
        x_ub: DVector::from_row_slice(&cfg.ocp.x_ub),
        u_lb: DVector::from_row_slice(&cfg.ocp.u_lb),
        u_ub: DVector::from_row_slice(&cfg.ocp.u_ub),
        soft_indices: cfg.ocp.soft_indices.clone(),
        penalty_rho: cfg.ocp.penalty_rho,
    };
    let instance = Arc::new(OcpInstance::build(
        spec,
        dynamics,
        qf.clone(),
        terminal.set.clone(),
    )?);

    Ok(BenchmarkSetup {
        params: cfg.vehicle.clone(),
        instance,
        qf,
        lqr_gain,
        a_cl,
        terminal,
    })
}

/// Scenario from the settings block, with the controller string resolved.
pub fn scenario_from_settings(s: &ScenarioSettings) -> Result<ScenarioConfig, ConfigError> {
    if s.x0.len() != STATE_DIM {
        return Err(ConfigError::Invalid("x0 must have 6 entries".into()));
    }
    let mode: HessianMode = s
        .mode
        .parse()
        .map_err(|e: String| ConfigError::Invalid(e))?;
    let init: InitStrategy = s
        .init
        .parse()
        .map_err(|e: String| ConfigError::Invalid(e))?;
    let controller = match s.controller.as_str() {
        "rti" => ControllerSpec::tdo(SqpConfig::rti(), init),
        "tdo" => ControllerSpec::tdo(SqpConfig::new(mode, s.ell), init),
        "optimal" => ControllerSpec {
            kind: ControllerKind::Optimal,
            cfg: SqpConfig::new(mode, 1),
            init,
        },
        "lqr" => ControllerSpec::lqr(),
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown controller `{other}` (rti|tdo|optimal|lqr)"
            )))
        }
    };
    let mut x0 = [0.0; STATE_DIM];
    x0.copy_from_slice(&s.x0);
    Ok(ScenarioConfig {
        x0: PlantState::from_array(x0),
        steps: s.steps,
        seed: s.seed,
        gust_mean: s.gust_mean,
        gust_std: s.gust_std,
        disturbance_on: s.disturbance,
        controller,
        error_oracle: s.error_oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_a_complete_config() {
        let cfg: AppConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.ocp.horizon, 30);
        assert_eq!(cfg.vehicle.m, 2041.0);
        // angle bounds stored in radians
        assert!((cfg.ocp.x_ub[1] - 7.0 * DEG).abs() < 1e-12);
        assert!((cfg.ocp.x_ub[4] - 35.0 * DEG).abs() < 1e-12);
    }

    #[test]
    fn scenario_controller_strings() {
        let mut s = ScenarioSettings::default();
        assert!(matches!(
            scenario_from_settings(&s).unwrap().controller.kind,
            ControllerKind::Tdo
        ));
        s.controller = "lqr".into();
        assert!(matches!(
            scenario_from_settings(&s).unwrap().controller.kind,
            ControllerKind::Lqr
        ));
        s.controller = "bogus".into();
        assert!(scenario_from_settings(&s).is_err());
    }
}
