//! Computable quantities from the convergence analysis: empirical rate
//! fits, the per-iteration-count gain table, the small-gain test, and
//! numerical regularity monitors.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{kernel_basis, matrix_rank};
use crate::model::{self, PlantState, VehicleParams};
use crate::ocp::{OcpInstance, PrimalDualPoint};
use crate::par::maybe_par_map;
use crate::sqp::{solve_to_tolerance, td_step, HessianMode, SqpConfig, SqpError};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("oracle solve failed: {0}")]
    Oracle(#[from] SqpError),
    #[error("fit refused: only {valid} valid samples")]
    FitRefused { valid: usize },
    #[error("rate hypothesis violated: eta * eps^(q-1) = {product:.3} >= 1")]
    HypothesisViolated { product: f64 },
    #[error("parameter segment degenerate (consecutive points coincide)")]
    DegenerateSegment,
    #[error("solution branch jump detected at segment index {index} (ratio {ratio:.3e})")]
    BranchJump { index: usize, ratio: f64 },
    #[error("parameter sample {index} unsolvable: {source}")]
    Unsolvable { index: usize, source: SqpError },
}

/// One perturbation probe: distance before and after a single step.
#[derive(Clone, Debug)]
pub struct RateSample {
    pub radius: f64,
    pub e0: f64,
    pub e1: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct RateSamples {
    pub z_star: PrimalDualPoint,
    pub samples: Vec<RateSample>,
    pub radii: Vec<f64>,
    pub trials_per_radius: usize,
}

/// Reference solution used by the probes: a Gauss-Newton solve followed by
/// an exact-Hessian polish.
pub fn reference_solution(
    inst: &OcpInstance,
    x: &DVector<f64>,
) -> Result<PrimalDualPoint, DiagnosticsError> {
    let z0 = PrimalDualPoint::zeros(&inst.dims);
    let gn = SqpConfig::new(HessianMode::gauss_newton(), 1);
    let (z_gn, _) = solve_to_tolerance(inst, &z0, x, &gn)?;
    let mut jn = SqpConfig::new(HessianMode::josephy_newton(), 1);
    jn.kkt_tol = 1e-9;
    match solve_to_tolerance(inst, &z_gn, x, &jn) {
        Ok((z, _)) => Ok(z),
        // The GN point already sits at tolerance; keep it if the polish
        // cannot improve further.
        Err(SqpError::NoConvergence { .. }) => Ok(z_gn),
        Err(e) => Err(e.into()),
    }
}

/// Perturb the reference solution at each radius and record single-step
/// error pairs plus whether the full iteration recontracts to the oracle.
pub fn rate_samples(
    inst: &OcpInstance,
    x: &DVector<f64>,
    mode: &HessianMode,
    radii: &[f64],
    trials: usize,
    seed: u64,
) -> Result<RateSamples, DiagnosticsError> {
    let z_star = reference_solution(inst, x)?;
    let z_star_vec = z_star.to_vector();
    let n = inst.dims.total();
    let step_cfg = SqpConfig::new(*mode, 1);
    let dist_tol = 1e-5 * (1.0 + z_star.norm());

    let mut probes = Vec::new();
    for (ri, &r) in radii.iter().enumerate() {
        for t in 0..trials {
            probes.push((ri, t, r));
        }
    }
    let z_star_vec_ref = &z_star_vec;
    let samples = maybe_par_map(probes, move |(ri, t, r)| {
        let mut rng = ChaCha12Rng::seed_from_u64(
            seed ^ ((ri as u64 * 10_007 + t as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15)),
        );
        let mut dir = DVector::from_fn(n, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let dn = dir.norm();
        if dn < 1e-12 {
            dir = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        } else {
            dir /= dn;
        }
        let z_pert = PrimalDualPoint::from_vector(&(z_star_vec_ref + dir * r), &inst.dims);
        let e0 = r;
        match td_step(inst, &z_pert, x, &step_cfg, None) {
            Ok((z1, _)) => {
                let e1 = (z1.to_vector() - z_star_vec_ref).norm();
                let converged = match solve_to_tolerance(inst, &z1, x, &step_cfg) {
                    Ok((z_end, _)) => (z_end.to_vector() - z_star_vec_ref).norm() <= dist_tol,
                    Err(_) => false,
                };
                RateSample {
                    radius: r,
                    e0,
                    e1,
                    converged,
                }
            }
            Err(_) => RateSample {
                radius: r,
                e0,
                e1: f64::INFINITY,
                converged: false,
            },
        }
    });
    Ok(RateSamples {
        z_star,
        samples,
        radii: radii.to_vec(),
        trials_per_radius: trials,
    })
}

/// Log-log least squares of `e1` on `e0`: returns `(slope, intercept_exp,
/// r_squared)`, i.e. the fitted `q`, `eta`, and the regression quality.
pub fn fit_power_law(pairs: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pairs.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx < 1e-12 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let pred = slope * x + intercept;
            (y - pred) * (y - pred)
        })
        .sum();
    let r2 = if ss_tot > 1e-300 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Some((slope, intercept.exp(), r2))
}

#[derive(Clone, Debug)]
pub struct RateFit {
    pub q_hat: f64,
    pub eta_hat: f64,
    /// Largest probed radius at which every trial recontracted to the
    /// reference solution; an empirical lower bound on the convergence
    /// radius.
    pub eps_hat: f64,
    pub sample_count: usize,
    pub r_squared: f64,
    pub radii: Vec<f64>,
    pub converged_per_radius: Vec<usize>,
    pub trials_per_radius: usize,
}

/// Perturb-and-step rate identification.
pub fn fit_rate(
    inst: &OcpInstance,
    x: &DVector<f64>,
    mode: &HessianMode,
    radii: &[f64],
    trials: usize,
    seed: u64,
) -> Result<RateFit, DiagnosticsError> {
    let data = rate_samples(inst, x, mode, radii, trials, seed)?;
    let mut converged_per_radius = vec![0usize; radii.len()];
    let mut pairs = Vec::new();
    for (i, &r) in radii.iter().enumerate() {
        for s in data.samples.iter().filter(|s| s.radius == r) {
            if s.converged {
                converged_per_radius[i] += 1;
                // keep pairs clear of the solver noise floor
                if s.e1 > 1e-11 && s.e1.is_finite() {
                    pairs.push((s.e0, s.e1));
                }
            }
        }
    }
    if pairs.len() < 10 {
        return Err(DiagnosticsError::FitRefused { valid: pairs.len() });
    }
    let (q_hat, eta_hat, r_squared) =
        fit_power_law(&pairs).ok_or(DiagnosticsError::FitRefused { valid: pairs.len() })?;
    let eps_hat = radii
        .iter()
        .enumerate()
        .filter(|(i, _)| converged_per_radius[*i] == trials)
        .map(|(_, &r)| r)
        .fold(0.0, f64::max);
    Ok(RateFit {
        q_hat,
        eta_hat,
        eps_hat,
        sample_count: pairs.len(),
        r_squared,
        radii: radii.to_vec(),
        converged_per_radius,
        trials_per_radius: trials,
    })
}

#[derive(Clone, Debug)]
pub struct IssGains {
    pub ells: Vec<usize>,
    pub a_of_ell: Vec<f64>,
    pub theta_of_ell: Vec<f64>,
    pub sigma_of_ell: Vec<f64>,
    pub tau_of_ell: Vec<f64>,
    pub b_hat: f64,
    pub q_used: f64,
    /// Strictly decreasing contraction values inside (0, 1).
    pub valid: bool,
}

/// Tabulate the per-iteration-count gains:
/// `a(l) = eta^l` when `q = 1`, else `(eta eps^(q-1))^((q^l - 1)/(q - 1))`;
/// `theta = b a`, `sigma = theta / (1 - a)`, `tau = 1 / (2 (sigma + b))`.
pub fn compute_gains(
    q: f64,
    eta: f64,
    eps: f64,
    b_hat: f64,
    ells: &[usize],
) -> Result<IssGains, DiagnosticsError> {
    // Fits marginally below 1 are iteration-count noise on a linear method.
    let q_used = q.max(1.0);
    let linear = q_used <= 1.0 + 1e-9;
    let base = if linear { eta } else { eta * eps.powf(q_used - 1.0) };
    if !(base < 1.0) || base <= 0.0 {
        return Err(DiagnosticsError::HypothesisViolated { product: base });
    }
    let mut a_of_ell = Vec::with_capacity(ells.len());
    for &ell in ells {
        let a = if linear {
            base.powi(ell as i32)
        } else {
            let exponent = (q_used.powi(ell as i32) - 1.0) / (q_used - 1.0);
            base.powf(exponent)
        };
        a_of_ell.push(a);
    }
    let theta_of_ell: Vec<f64> = a_of_ell.iter().map(|a| b_hat * a).collect();
    let sigma_of_ell: Vec<f64> = a_of_ell
        .iter()
        .zip(&theta_of_ell)
        .map(|(a, th)| th / (1.0 - a))
        .collect();
    let tau_of_ell: Vec<f64> = sigma_of_ell.iter().map(|s| 0.5 / (s + b_hat)).collect();
    let mut valid = true;
    for (i, &a) in a_of_ell.iter().enumerate() {
        if !(a > 0.0 && a < 1.0) {
            valid = false;
        }
        if i > 0 && a >= a_of_ell[i - 1] {
            valid = false;
        }
    }
    Ok(IssGains {
        ells: ells.to_vec(),
        a_of_ell,
        theta_of_ell,
        sigma_of_ell,
        tau_of_ell,
        b_hat,
        q_used,
        valid,
    })
}

#[derive(Clone, Debug)]
pub struct LipschitzEstimate {
    pub b_hat: f64,
    pub ratios: Vec<f64>,
}

/// Track one solution branch along a parameter segment by warmstarting each
/// solve from the previous one; the largest difference quotient estimates
/// the branch's Lipschitz constant.
pub fn estimate_solution_lipschitz(
    inst: &OcpInstance,
    xs: &[DVector<f64>],
    cfg: &SqpConfig,
) -> Result<LipschitzEstimate, DiagnosticsError> {
    if xs.len() < 2 {
        return Err(DiagnosticsError::DegenerateSegment);
    }
    let z0 = PrimalDualPoint::zeros(&inst.dims);
    let (mut z_prev, _) = solve_to_tolerance(inst, &z0, &xs[0], cfg)
        .map_err(|e| DiagnosticsError::Unsolvable { index: 0, source: e })?;
    let mut ratios = Vec::new();
    let mut b_run: f64 = 0.0;
    for (j, x) in xs.iter().enumerate().skip(1) {
        let dx = (x - &xs[j - 1]).norm();
        if dx < 1e-12 {
            return Err(DiagnosticsError::DegenerateSegment);
        }
        let (z, _) = solve_to_tolerance(inst, &z_prev, x, cfg)
            .map_err(|e| DiagnosticsError::Unsolvable { index: j, source: e })?;
        let dz = (z.to_vector() - z_prev.to_vector()).norm();
        let ratio = dz / dx;
        if j >= 2 && ratio > 100.0 * (b_run + 1.0) {
            return Err(DiagnosticsError::BranchJump { index: j, ratio });
        }
        b_run = b_run.max(ratio);
        ratios.push(ratio);
        z_prev = z;
    }
    Ok(LipschitzEstimate { b_hat: b_run, ratios })
}

#[derive(Clone, Debug)]
pub struct SmallGainReport {
    pub satisfied: bool,
    /// First tabulated iteration count passing the product test.
    pub ell_star: Option<usize>,
    pub products: Vec<f64>,
    pub xi_norm: f64,
    pub gamma3_slope: f64,
    pub du_radius: f64,
    pub note: &'static str,
}

/// Check `||Xi|| sigma(l) gamma3_hat <= 1` per tabulated iteration count.
/// gamma3 is approximated by a linear slope identified from simulation.
pub fn small_gain_check(
    gains: &IssGains,
    xi_norm: f64,
    gamma3_slope: f64,
    du_radius: f64,
) -> SmallGainReport {
    let products: Vec<f64> = gains
        .sigma_of_ell
        .iter()
        .map(|s| xi_norm * s * gamma3_slope)
        .collect();
    let ell_star = gains
        .ells
        .iter()
        .zip(&products)
        .find(|(_, &p)| p <= 1.0)
        .map(|(&ell, _)| ell);
    SmallGainReport {
        satisfied: ell_star.is_some(),
        ell_star,
        products,
        xi_norm,
        gamma3_slope,
        du_radius,
        note: "gamma3 approximated by a linear slope; empirical check, not a certificate",
    }
}

/// Linear slope of the one-step state response to input perturbations,
/// regressed through the origin over probe points from a nominal run.
pub fn estimate_gamma3_slope(
    params: &VehicleParams,
    probes: &[(PlantState, [f64; 2])],
    du_mags: &[f64],
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, u0) in probes {
        let nominal = model::step(x, u0, 0.0, params);
        for &mag in du_mags {
            for _ in 0..4 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let norm = (a * a + b * b).sqrt().max(1e-12);
                let du = [mag * a / norm, mag * b / norm];
                let pert = model::step(x, &[u0[0] + du[0], u0[1] + du[1]], 0.0, params);
                let dy = nominal
                    .as_array()
                    .iter()
                    .zip(pert.as_array().iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                sxy += mag * dy;
                sxx += mag * mag;
            }
        }
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct LicqReport {
    pub deficiency: usize,
    pub rank: usize,
    pub rows: usize,
    pub active: Vec<usize>,
}

/// Stack the equality Jacobian with the active inequality rows and measure
/// the rank deficiency; zero means the constraint gradients are linearly
/// independent at this point.
pub fn licq_monitor(
    inst: &OcpInstance,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    tol: f64,
) -> LicqReport {
    let h = inst.eval_ineq(&z.w);
    let active: Vec<usize> = (0..h.len()).filter(|&i| h[i] >= -tol).collect();
    let jacs = inst.stage_jacobians(&z.w, x);
    let eq = inst.eq_jacobian(&jacs).to_dense();
    let p = inst.dims.n_primal;
    let rows = eq.nrows() + active.len();
    let mut m = DMatrix::zeros(rows, p);
    m.view_mut((0, 0), (eq.nrows(), p)).copy_from(&eq);
    for (r, &i) in active.iter().enumerate() {
        for &(c, v) in &inst.ineq_rows().rows[i] {
            m[(eq.nrows() + r, c)] = v;
        }
    }
    let rank = matrix_rank(&m, 1e-10);
    LicqReport {
        deficiency: rows - rank,
        rank,
        rows,
        active,
    }
}

#[derive(Clone, Debug)]
pub struct SsoscReport {
    pub min_eigenvalue: f64,
    pub kernel_dim: usize,
    pub strongly_active: Vec<usize>,
}

/// Minimum eigenvalue of the Lagrangian Hessian restricted to the null
/// space of the equality Jacobian and the strongly active inequality rows.
/// Positive means the strong second-order condition holds numerically. A
/// zero-dimensional kernel is reported as +infinity (vacuous).
pub fn ssosc_monitor(
    inst: &OcpInstance,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    hess: &DMatrix<f64>,
    tol: f64,
) -> SsoscReport {
    let h = inst.eval_ineq(&z.w);
    let strongly_active: Vec<usize> = (0..h.len())
        .filter(|&i| h[i] >= -tol && z.v[i] > tol)
        .collect();
    let jacs = inst.stage_jacobians(&z.w, x);
    let eq = inst.eq_jacobian(&jacs).to_dense();
    let p = inst.dims.n_primal;
    let rows = eq.nrows() + strongly_active.len();
    let mut m = DMatrix::zeros(rows, p);
    m.view_mut((0, 0), (eq.nrows(), p)).copy_from(&eq);
    for (r, &i) in strongly_active.iter().enumerate() {
        for &(c, v) in &inst.ineq_rows().rows[i] {
            m[(eq.nrows() + r, c)] = v;
        }
    }
    let z_basis = kernel_basis(&m, 1e-10);
    if z_basis.ncols() == 0 {
        return SsoscReport {
            min_eigenvalue: f64::INFINITY,
            kernel_dim: 0,
            strongly_active,
        };
    }
    let reduced = z_basis.transpose() * hess * &z_basis;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let min_eigenvalue = nalgebra::SymmetricEigen::new(sym).eigenvalues.min();
    SsoscReport {
        min_eigenvalue,
        kernel_dim: z_basis.ncols(),
        strongly_active,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::invariant_set::Polytope;
    use crate::ocp::{OcpInstance, OcpSpec};
    use crate::sqp::{gn_hessian, jn_hessian};
    use crate::testkit::{double_integrator, double_integrator_instance};
    use std::sync::Arc;

    #[test]
    fn power_law_regression_recovers_synthetic_rates() {
        for &(q, eta) in &[(1.0, 0.5), (2.0, 3.0), (1.5, 0.9)] {
            let mut pairs = Vec::new();
            for i in 0..40 {
                let e0 = 10f64.powf(-1.0 - 0.05 * i as f64);
                pairs.push((e0, eta * e0.powf(q)));
            }
            let (qh, eh, r2) = fit_power_law(&pairs).unwrap();
            assert!((qh - q).abs() < 1e-6, "q {qh} vs {q}");
            assert!((eh - eta).abs() < 1e-6 * eta.max(1.0));
            assert!(r2 > 1.0 - 1e-9);
        }
    }

    #[test]
    fn gain_table_hand_values_linear() {
        // q = 1, eta = 0.5, b = 2
        let g = compute_gains(1.0, 0.5, 0.1, 2.0, &[1, 2, 3]).unwrap();
        assert!((g.a_of_ell[0] - 0.5).abs() < 1e-15);
        assert!((g.a_of_ell[1] - 0.25).abs() < 1e-15);
        assert!((g.sigma_of_ell[0] - 2.0).abs() < 1e-12);
        assert!(g.valid);
    }

    #[test]
    fn gain_table_hand_values_quadratic() {
        // q = 2 with eta * eps = 0.5: a(1) = 0.5, a(2) = 0.125
        let g = compute_gains(2.0, 5.0, 0.1, 1.0, &[1, 2]).unwrap();
        assert!((g.a_of_ell[0] - 0.5).abs() < 1e-15);
        assert!((g.a_of_ell[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn gains_shrink_monotonically() {
        let ells: Vec<usize> = (1..=10).collect();
        let g = compute_gains(1.0, 0.7, 0.1, 3.0, &ells).unwrap();
        assert!(g.valid);
        for i in 1..g.sigma_of_ell.len() {
            assert!(g.sigma_of_ell[i] < g.sigma_of_ell[i - 1]);
            assert!(g.tau_of_ell[i] > g.tau_of_ell[i - 1]);
        }
    }

    #[test]
    fn hypothesis_violation_rejected() {
        assert!(matches!(
            compute_gains(1.0, 1.2, 0.1, 1.0, &[1]),
            Err(DiagnosticsError::HypothesisViolated { .. })
        ));
        assert!(matches!(
            compute_gains(2.0, 3.0, 1.0, 1.0, &[1]),
            Err(DiagnosticsError::HypothesisViolated { .. })
        ));
    }

    #[test]
    fn small_gain_trivially_passes_for_zero_slope() {
        let g = compute_gains(1.0, 0.5, 0.1, 2.0, &[1, 2, 3]).unwrap();
        let rep = small_gain_check(&g, 1.0, 0.0, 0.1);
        assert!(rep.satisfied);
        assert_eq!(rep.ell_star, Some(1));
    }

    #[test]
    fn small_gain_passes_eventually_for_finite_slope() {
        let g = compute_gains(1.0, 0.6, 0.1, 2.0, &(1..=20).collect::<Vec<_>>()).unwrap();
        let rep = small_gain_check(&g, 1.0, 0.4, 0.1);
        assert!(rep.satisfied);
        assert!(rep.ell_star.unwrap() >= 1);
    }

    #[test]
    fn single_newton_step_lands_on_linear_quadratic() {
        let inst = double_integrator_instance(3, false);
        let x = DVector::from_vec(vec![0.6, -0.2]);
        let data = rate_samples(
            &inst,
            &x,
            &HessianMode::josephy_newton(),
            &[1e-2, 1e-3],
            5,
            11,
        )
        .unwrap();
        for s in &data.samples {
            assert!(s.converged);
            assert!(s.e1 <= 1e-9, "one-step error {}", s.e1);
        }
    }

    #[test]
    fn lipschitz_estimate_matches_linear_sensitivity() {
        // Unconstrained linear-quadratic instance: z*(x) is linear, so the
        // difference quotient equals the directional sensitivity norm. The
        // oracle builds it from two exact solves far apart.
        let inst = double_integrator_instance(3, false);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let dir = DVector::from_vec(vec![1.0, 0.5]);
        let xs: Vec<DVector<f64>> = (0..6)
            .map(|i| &dir * (0.05 + 0.01 * i as f64))
            .collect();
        let est = estimate_solution_lipschitz(&inst, &xs, &cfg).unwrap();

        let z0 = PrimalDualPoint::zeros(&inst.dims);
        let (za, _) = solve_to_tolerance(&inst, &z0, &(&dir * 0.05), &cfg).unwrap();
        let (zb, _) = solve_to_tolerance(&inst, &z0, &(&dir * 0.10), &cfg).unwrap();
        let oracle = (zb.to_vector() - za.to_vector()).norm() / (&dir * 0.05).norm();
        assert!(
            (est.b_hat - oracle).abs() <= 0.05 * oracle,
            "b_hat {} vs oracle {}",
            est.b_hat,
            oracle
        );
    }

    #[test]
    fn degenerate_segment_refused() {
        let inst = double_integrator_instance(3, false);
        let cfg = SqpConfig::new(HessianMode::gauss_newton(), 1);
        let x = DVector::from_vec(vec![0.1, 0.0]);
        assert!(matches!(
            estimate_solution_lipschitz(&inst, &[x.clone(), x], &cfg),
            Err(DiagnosticsError::DegenerateSegment)
        ));
    }

    #[test]
    fn licq_holds_on_clean_instance() {
        let inst = double_integrator_instance(4, false);
        let x = DVector::from_vec(vec![0.4, 0.1]);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let (z, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg).unwrap();
        let rep = licq_monitor(&inst, &z, &x, 1e-6);
        assert_eq!(rep.deficiency, 0);
    }

    #[test]
    fn duplicated_active_row_is_detected() {
        // Two identical terminal rows; place the terminal state exactly on
        // that face so both copies are active.
        let row = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let b = DVector::from_vec(vec![0.2, 0.2]);
        let spec = OcpSpec {
            horizon: 2,
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            x_lb: DVector::from_vec(vec![-5.0, -5.0]),
            x_ub: DVector::from_vec(vec![5.0, 5.0]),
            u_lb: DVector::from_vec(vec![-4.0]),
            u_ub: DVector::from_vec(vec![4.0]),
            soft_indices: vec![],
            penalty_rho: 1e3,
        };
        let inst = OcpInstance::build(
            spec,
            Arc::new(double_integrator()),
            DMatrix::identity(2, 2),
            Polytope::new(row, b),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, 0.0]);
        let mut z = PrimalDualPoint::zeros(&inst.dims);
        let xi2 = inst.layout.xi_range(2);
        z.w[xi2.start] = 0.2;
        let clean = licq_monitor(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, 1e-6);
        assert_eq!(clean.deficiency, 0);
        let rep = licq_monitor(&inst, &z, &x, 1e-6);
        assert_eq!(rep.deficiency, 1);
    }

    #[test]
    fn ssosc_positive_on_strictly_convex_instance() {
        let inst = double_integrator_instance(3, true);
        let x = DVector::from_vec(vec![0.5, -0.1]);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let (z, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg).unwrap();
        let hess = jn_hessian(&inst, &z, &x, &HessianMode::josephy_newton());
        let rep = ssosc_monitor(&inst, &z, &x, &hess, 1e-6);
        assert!(rep.min_eigenvalue > 0.0);
    }

    #[test]
    fn injected_zero_curvature_direction_is_flagged() {
        // Wiping the curvature leaves every feasible direction flat; the
        // monitor must report it. (Zeroing a single input block is not
        // enough: the dynamics route any input move through the state
        // weights, which keeps the reduced curvature positive.)
        let inst = double_integrator_instance(3, false);
        let x = DVector::from_vec(vec![0.5, -0.1]);
        let cfg = SqpConfig::new(HessianMode::josephy_newton(), 1);
        let (z, _) =
            solve_to_tolerance(&inst, &PrimalDualPoint::zeros(&inst.dims), &x, &cfg).unwrap();
        let healthy = ssosc_monitor(&inst, &z, &x, &gn_hessian(&inst), 1e-6);
        assert!(healthy.min_eigenvalue > 0.0);
        let flat = DMatrix::zeros(inst.dims.n_primal, inst.dims.n_primal);
        let rep = ssosc_monitor(&inst, &z, &x, &flat, 1e-6);
        assert!(rep.min_eigenvalue <= 1e-6);
    }

    #[test]
    fn gamma3_slope_positive_for_vehicle() {
        let params = VehicleParams::default();
        let probes = vec![
            (PlantState::zero(), [0.0, 0.0]),
            (
                PlantState::from_array([-2.0, 0.05, 0.3, -0.05, 0.1, -0.01]),
                [0.2, -0.1],
            ),
        ];
        let slope = estimate_gamma3_slope(&params, &probes, &[0.05, 0.1], 5);
        assert!(slope > 0.0);
    }
}
