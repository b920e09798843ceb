//! Closed-loop simulation of the vehicle with seeded wind gusts.
//!
//! Everything is deterministic given the seed: the gust sequence is drawn
//! up front from a named, portable generator (ChaCha12), so runs with the
//! same seed see identical disturbance realizations regardless of the
//! controller, the iteration budget, or parallel scheduling.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::controller::{
    clamp_input, initialize, DareError, InitStrategy, LqrController, OptimalMpc, TdoController,
};
use crate::model::{self, PlantState, VehicleParams, STATE_DIM};
use crate::ocp::{stage_cost, OcpInstance, PrimalDualPoint};
use crate::par::maybe_par_map;
use crate::sqp::SqpConfig;

/// Generator identity recorded in every log header.
pub const RNG_ID: &str = "chacha12";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerKind {
    Tdo,
    Optimal,
    Lqr,
}

impl ControllerKind {
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Tdo => "tdo",
            ControllerKind::Optimal => "optimal",
            ControllerKind::Lqr => "lqr",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub cfg: SqpConfig,
    pub init: InitStrategy,
}

impl ControllerSpec {
    /// Gauss-Newton, one iteration per instant, presolved warmstart.
    pub fn rti() -> Self {
        ControllerSpec {
            kind: ControllerKind::Tdo,
            cfg: SqpConfig::rti(),
            init: InitStrategy::Presolve,
        }
    }

    pub fn tdo(cfg: SqpConfig, init: InitStrategy) -> Self {
        ControllerSpec {
            kind: ControllerKind::Tdo,
            cfg,
            init,
        }
    }

    pub fn optimal() -> Self {
        ControllerSpec {
            kind: ControllerKind::Optimal,
            cfg: SqpConfig::rti(),
            init: InitStrategy::Presolve,
        }
    }

    pub fn lqr() -> Self {
        ControllerSpec {
            kind: ControllerKind::Lqr,
            cfg: SqpConfig::rti(),
            init: InitStrategy::Cold,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub x0: PlantState,
    pub steps: usize,
    pub seed: u64,
    pub gust_mean: f64,
    pub gust_std: f64,
    pub disturbance_on: bool,
    pub controller: ControllerSpec,
    /// Track the fully converged oracle alongside and log ||z_k - z*(x_k)||.
    pub error_oracle: bool,
}

impl ScenarioConfig {
    /// Lane-change scenario: start one lane over, gusts N(15, 5).
    pub fn benchmark(controller: ControllerSpec) -> Self {
        ScenarioConfig {
            x0: PlantState::from_array([-3.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
            steps: 250,
            seed: 1,
            gust_mean: 15.0,
            gust_std: 5.0,
            disturbance_on: true,
            controller,
            error_oracle: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub k: usize,
    pub x: [f64; STATE_DIM],
    pub u: [f64; 2],
    pub d: f64,
    pub ell: usize,
    pub mode: String,
    pub pi_before: Option<f64>,
    pub pi_after: Option<f64>,
    pub reg_delta: Option<f64>,
    pub active_set_size: Option<usize>,
    pub e_norm: Option<f64>,
    pub stage_cost: f64,
    pub cum_cost: f64,
    pub clamped: bool,
    pub held: bool,
    pub event: String,
    /// Signed box margins (lo, hi) per state, negative when satisfied.
    pub margins: [f64; 2 * STATE_DIM],
    /// Control computation time. Kept out of the CSV: wall time is not
    /// deterministic and the CSVs are byte-reproducible by contract.
    pub wall_us: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ClosedLoopLog {
    pub header: Vec<(String, String)>,
    pub events: Vec<String>,
    pub records: Vec<StepRecord>,
}

impl ClosedLoopLog {
    pub fn cumulative_cost(&self) -> f64 {
        self.records.last().map(|r| r.cum_cost).unwrap_or(0.0)
    }

    pub fn max_abs_psi(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.x[1].abs())
            .fold(0.0, f64::max)
    }

    pub fn max_residual(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| r.pi_after)
            .fold(0.0, f64::max)
    }

    pub fn final_state_norm(&self) -> f64 {
        self.records
            .last()
            .map(|r| r.x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0)
    }

    pub fn clamp_count(&self) -> usize {
        self.records.iter().filter(|r| r.clamped).count()
    }

    pub fn held_count(&self) -> usize {
        self.records.iter().filter(|r| r.held).count()
    }

    pub fn mean_wall_us(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.wall_us as f64).sum::<f64>() / self.records.len() as f64
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.pi_after).collect()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    BadConfig(&'static str),
    #[error("LQR synthesis failed: {0}")]
    Lqr(#[from] DareError),
    #[error("gust model: {0}")]
    Gust(String),
}

/// Plant parameters plus the assembled problem the controllers work on.
#[derive(Clone)]
pub struct SimSetup {
    pub params: VehicleParams,
    pub instance: Arc<OcpInstance>,
}

pub fn state_margins(x: &PlantState, x_lb: &DVector<f64>, x_ub: &DVector<f64>) -> [f64; 12] {
    let xa = x.as_array();
    let mut m = [0.0; 12];
    for j in 0..STATE_DIM {
        m[2 * j] = x_lb[j] - xa[j];
        m[2 * j + 1] = xa[j] - x_ub[j];
    }
    m
}

enum LoopController {
    Tdo(TdoController),
    Optimal(OptimalMpc),
    Lqr(LqrController),
}

/// Run one closed-loop scenario. Controller failures are logged as events
/// and the loop continues with the held fallback input.
pub fn run_scenario(setup: &SimSetup, cfg: &ScenarioConfig) -> Result<ClosedLoopLog, SimError> {
    if cfg.steps < 1 {
        return Err(SimError::BadConfig("steps must be at least 1"));
    }
    if cfg.gust_std < 0.0 {
        return Err(SimError::BadConfig("gust_std must be nonnegative"));
    }
    let inst = &setup.instance;
    let x0_vec = DVector::from_row_slice(&cfg.x0.as_array());

    // Disturbance realization, fixed up front.
    let d_seq: Vec<f64> = if cfg.disturbance_on && cfg.gust_std >= 0.0 {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(cfg.gust_mean, cfg.gust_std).map_err(|e| SimError::Gust(e.to_string()))?;
        (0..cfg.steps).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; cfg.steps]
    };

    let mut events = Vec::new();
    let mut controller = match cfg.controller.kind {
        ControllerKind::Tdo | ControllerKind::Optimal => {
            let z0 = match initialize(inst, &x0_vec, cfg.controller.init, &cfg.controller.cfg) {
                Ok(z) => z,
                Err(e) => {
                    events.push(format!("presolve failed ({e}); falling back to cold start"));
                    PrimalDualPoint::zeros(&inst.dims)
                }
            };
            match cfg.controller.kind {
                ControllerKind::Tdo => LoopController::Tdo(TdoController::new(
                    Arc::clone(inst),
                    cfg.controller.cfg,
                    z0,
                )),
                _ => LoopController::Optimal(OptimalMpc::new(
                    Arc::clone(inst),
                    cfg.controller.cfg,
                    z0,
                )),
            }
        }
        ControllerKind::Lqr => LoopController::Lqr(LqrController::from_dynamics(
            inst.dynamics.as_ref(),
            &inst.spec.q,
            &inst.spec.r,
            inst.spec.u_lb.clone(),
            inst.spec.u_ub.clone(),
        )?),
    };

    // Optional fully converged oracle running alongside.
    let mut oracle = if cfg.error_oracle {
        let z0 = initialize(inst, &x0_vec, InitStrategy::Presolve, &cfg.controller.cfg)
            .unwrap_or_else(|_| PrimalDualPoint::zeros(&inst.dims));
        Some(OptimalMpc::new(Arc::clone(inst), cfg.controller.cfg, z0))
    } else {
        None
    };

    let mut header = vec![
        ("controller".to_string(), cfg.controller.kind.label().to_string()),
        ("mode".to_string(), cfg.controller.cfg.mode.label().to_string()),
        ("ell".to_string(), cfg.controller.cfg.ell.to_string()),
        (
            "init".to_string(),
            match cfg.controller.init {
                InitStrategy::Cold => "cold".to_string(),
                InitStrategy::Presolve => "presolve".to_string(),
            },
        ),
        ("seed".to_string(), cfg.seed.to_string()),
        ("rng".to_string(), RNG_ID.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("gust_mean".to_string(), crate::logio::fmt_f64(cfg.gust_mean)),
        ("gust_std".to_string(), crate::logio::fmt_f64(cfg.gust_std)),
        (
            "disturbance".to_string(),
            if cfg.disturbance_on { "on" } else { "off" }.to_string(),
        ),
        (
            "x0".to_string(),
            cfg.x0
                .as_array()
                .iter()
                .map(|v| crate::logio::fmt_f64(*v))
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("ts".to_string(), crate::logio::fmt_f64(setup.params.ts)),
        ("horizon".to_string(), inst.layout.horizon.to_string()),
    ];
    header.push((
        "error_oracle".to_string(),
        if cfg.error_oracle { "on" } else { "off" }.to_string(),
    ));

    let mut records = Vec::with_capacity(cfg.steps);
    let mut x = cfg.x0;
    let mut cum_cost = 0.0;

    for k in 0..cfg.steps {
        let x_vec = DVector::from_row_slice(&x.as_array());
        let t0 = Instant::now();
        let (u_vec, ell_used, pi_before, pi_after, reg_delta, active_len, clamped, held, event) =
            match &mut controller {
                LoopController::Tdo(ctrl) => {
                    let out = ctrl.control(&x_vec);
                    let (pb, pa, rd, al) = match &out.report {
                        Some(r) => (
                            Some(r.pi_before),
                            Some(r.pi_after),
                            Some(r.reg_delta),
                            Some(r.active_set.len()),
                        ),
                        None => (None, None, None, None),
                    };
                    (
                        out.u,
                        ctrl.cfg.ell,
                        pb,
                        pa,
                        rd,
                        al,
                        out.clamped,
                        out.held,
                        out.event.unwrap_or_default(),
                    )
                }
                LoopController::Optimal(opt) => match opt.control(&x_vec) {
                    Ok((u, iters)) => {
                        let pi = inst.natural_residual(&opt.z, &x_vec);
                        (u, iters, None, Some(pi), None, None, false, false, String::new())
                    }
                    Err(e) => {
                        let raw = inst.extract_u0(&opt.z);
                        let (u, _) = clamp_input(&raw, &inst.spec.u_lb, &inst.spec.u_ub);
                        (
                            u,
                            0,
                            None,
                            None,
                            None,
                            None,
                            true,
                            true,
                            format!("full solve failed, holding estimate: {e}"),
                        )
                    }
                },
                LoopController::Lqr(lqr) => {
                    let (u, clamped) = lqr.control(&x_vec);
                    (u, 0, None, None, None, None, clamped, false, String::new())
                }
            };
        let wall_us = t0.elapsed().as_micros() as u64;

        let e_norm = match (&mut oracle, &controller) {
            (Some(orc), LoopController::Tdo(ctrl)) => match orc.control(&x_vec) {
                Ok(_) => Some((ctrl.z.to_vector() - orc.z.to_vector()).norm()),
                Err(e) => {
                    events.push(format!("k={k}: error oracle failed: {e}"));
                    None
                }
            },
            _ => None,
        };

        let d = d_seq[k];
        let stage = stage_cost(&inst.spec.q, &inst.spec.r, &x_vec, &u_vec);
        cum_cost += stage;
        let margins = state_margins(&x, &inst.spec.x_lb, &inst.spec.x_ub);

        let u_arr = [u_vec[0], u_vec[1]];
        records.push(StepRecord {
            k,
            x: x.as_array(),
            u: u_arr,
            d,
            ell: ell_used,
            mode: cfg.controller.cfg.mode.label().to_string(),
            pi_before,
            pi_after,
            reg_delta,
            active_set_size: active_len,
            e_norm,
            stage_cost: stage,
            cum_cost,
            clamped,
            held,
            event,
            margins,
            wall_us,
        });

        x = model::step(&x, &[u_arr[0], u_arr[1]], d, &setup.params);
    }

    Ok(ClosedLoopLog {
        header,
        events,
        records,
    })
}

/// One cell of an iteration/Hessian sweep.
pub struct SweepCell {
    pub mode: String,
    pub ell: usize,
    pub log: Result<ClosedLoopLog, SimError>,
}

/// Cross product of modes and iteration counts, all with the same seed so
/// disturbance realizations match cell to cell.
pub fn sweep_ell(
    setup: &SimSetup,
    base: &ScenarioConfig,
    ells: &[usize],
    modes: &[crate::sqp::HessianMode],
) -> Vec<SweepCell> {
    let mut specs = Vec::new();
    for mode in modes {
        for &ell in ells {
            specs.push((*mode, ell));
        }
    }
    maybe_par_map(specs, move |(mode, ell)| {
        let mut cfg = base.clone();
        cfg.controller.kind = ControllerKind::Tdo;
        cfg.controller.cfg = SqpConfig {
            mode,
            ell,
            ..cfg.controller.cfg
        };
        SweepCell {
            mode: mode.label().to_string(),
            ell,
            log: run_scenario(setup, &cfg),
        }
    })
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub mode: String,
    pub ell: usize,
    pub ok: bool,
    pub max_abs_psi: f64,
    pub max_residual: f64,
    pub median_residual: f64,
    pub cum_cost: f64,
}

pub fn summarize_sweep(cells: &[SweepCell]) -> Vec<SweepRow> {
    cells
        .iter()
        .map(|c| match &c.log {
            Ok(log) => {
                let mut res = log.residuals();
                res.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = if res.is_empty() {
                    0.0
                } else {
                    res[res.len() / 2]
                };
                SweepRow {
                    mode: c.mode.clone(),
                    ell: c.ell,
                    ok: true,
                    max_abs_psi: log.max_abs_psi(),
                    max_residual: log.max_residual(),
                    median_residual: median,
                    cum_cost: log.cumulative_cost(),
                }
            }
            Err(_) => SweepRow {
                mode: c.mode.clone(),
                ell: c.ell,
                ok: false,
                max_abs_psi: f64::NAN,
                max_residual: f64::NAN,
                median_residual: f64::NAN,
                cum_cost: f64::NAN,
            },
        })
        .collect()
}

/// One run per `(y0, psi0)` grid point, all other states zero.
pub struct RoaRun {
    pub y0: f64,
    pub psi0: f64,
    pub log: Result<ClosedLoopLog, SimError>,
}

pub fn multi_initial_conditions(
    setup: &SimSetup,
    base: &ScenarioConfig,
    grid: &[(f64, f64)],
) -> Vec<RoaRun> {
    maybe_par_map(grid.to_vec(), move |(y0, psi0)| {
        let mut cfg = base.clone();
        cfg.x0 = PlantState::from_array([y0, psi0, 0.0, 0.0, 0.0, 0.0]);
        RoaRun {
            y0,
            psi0,
            log: run_scenario(setup, &cfg),
        }
    })
}

/// Default 15-point grid: five lateral offsets by three yaw angles.
pub fn default_roa_grid() -> Vec<(f64, f64)> {
    let deg = std::f64::consts::PI / 180.0;
    let mut grid = Vec::new();
    for y0 in [-3.7, -2.775, -1.85, -0.925, 0.0] {
        for psi0 in [-5.0 * deg, 0.0, 5.0 * deg] {
            grid.push((y0, psi0));
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_setup, AppConfig};
    use std::sync::OnceLock;

    fn tiny_setup() -> &'static SimSetup {
        static SETUP: OnceLock<SimSetup> = OnceLock::new();
        SETUP.get_or_init(|| {
            let mut cfg = AppConfig::default();
            cfg.ocp.horizon = 8;
            cfg.scenario.steps = 10;
            build_setup(&cfg).unwrap().into_sim_setup()
        })
    }

    fn quick_scenario(controller: ControllerSpec, steps: usize) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::benchmark(controller);
        cfg.steps = steps;
        cfg
    }

    #[test]
    fn equilibrium_stays_at_zero() {
        let setup = tiny_setup();
        let mut cfg = quick_scenario(ControllerSpec::rti(), 8);
        cfg.x0 = PlantState::zero();
        cfg.disturbance_on = false;
        let log = run_scenario(setup, &cfg).unwrap();
        for r in &log.records {
            assert!(r.x.iter().all(|v| v.abs() < 1e-9));
            assert!(r.u.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let setup = tiny_setup();
        let cfg = quick_scenario(ControllerSpec::rti(), 10);
        let a = run_scenario(setup, &cfg).unwrap();
        let b = run_scenario(setup, &cfg).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.x, rb.x);
            assert_eq!(ra.u, rb.u);
            assert_eq!(ra.d, rb.d);
        }
    }

    #[test]
    fn shared_seed_aligns_disturbances_across_cells() {
        let setup = tiny_setup();
        let base = quick_scenario(ControllerSpec::rti(), 6);
        let cells = sweep_ell(
            setup,
            &base,
            &[1, 2],
            &[crate::sqp::HessianMode::gauss_newton()],
        );
        let d0: Vec<f64> = cells[0].log.as_ref().unwrap().records.iter().map(|r| r.d).collect();
        for c in &cells[1..] {
            let d: Vec<f64> = c.log.as_ref().unwrap().records.iter().map(|r| r.d).collect();
            assert_eq!(d0, d);
        }
    }

    #[test]
    fn cumulative_cost_is_nondecreasing() {
        let setup = tiny_setup();
        let log = run_scenario(setup, &quick_scenario(ControllerSpec::lqr(), 10)).unwrap();
        let mut prev = 0.0;
        for r in &log.records {
            assert!(r.cum_cost >= prev);
            prev = r.cum_cost;
        }
        assert_eq!(log.records.len(), 10);
    }

    #[test]
    fn roa_grid_base_point_matches_benchmark() {
        let grid = default_roa_grid();
        assert_eq!(grid.len(), 15);
        assert!(grid.iter().any(|&(y, p)| y == -3.7 && p == 0.0));
        assert!(grid.iter().any(|&(y, p)| y == 0.0 && p == 0.0));
    }

    #[test]
    fn rejects_bad_scenarios() {
        let setup = tiny_setup();
        let mut cfg = quick_scenario(ControllerSpec::rti(), 5);
        cfg.steps = 0;
        assert!(matches!(
            run_scenario(setup, &cfg),
            Err(SimError::BadConfig(_))
        ));
        let mut cfg2 = quick_scenario(ControllerSpec::rti(), 5);
        cfg2.gust_std = -1.0;
        assert!(matches!(
            run_scenario(setup, &cfg2),
            Err(SimError::BadConfig(_))
        ));
    }
}
