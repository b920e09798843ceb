//! Affine generalized-equation / QP subproblem solver.
//!
//! One Newton-type step solves
//! `min 1/2 dw' B dw + grad' dw  s.t.  G dw + g = 0,  A dw + h <= 0`,
//! equivalently the affine GE `H z+ + (F(z,x) - H z) + N_K(z+) ∋ 0`.
//!
//! The method is an active-set iteration on the working-set guess: solve the
//! equality-constrained KKT system for the guessed active rows, drop rows
//! with negative multipliers, add violated rows (all at once, with a
//! one-change-at-a-time fallback using lowest-index tie-breaking as an
//! anti-cycling guard). Warmstarting seeds the working set with the previous
//! active set, which is the regime the time-distributed loop lives in.
//!
//! KKT systems are factorized either densely or, when a stage grouping is
//! attached, by a banded LU on the stage-interleaved ordering.

use std::io::Write as IoWrite;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{bandwidths, BandedLu, SparseRows};

/// Stage grouping of a subproblem: column ranges and equality-row ranges per
/// stage, plus the owning stage of every inequality row. Rows and columns of
/// a group may only couple to groups at distance <= 1.
#[derive(Clone, Debug)]
pub struct StageStructure {
    pub col_groups: Vec<Range<usize>>,
    pub eq_groups: Vec<Range<usize>>,
    pub ineq_group: Vec<usize>,
}

/// Data of one Newton-type step.
#[derive(Clone, Debug)]
pub struct QpSubproblem {
    /// Symmetric Hessian approximation on the primal block.
    pub hess: DMatrix<f64>,
    /// Objective gradient.
    pub grad: DVector<f64>,
    pub eq_jac: SparseRows,
    pub eq_rhs: DVector<f64>,
    pub ineq_jac: SparseRows,
    pub ineq_rhs: DVector<f64>,
    /// Applied to the Hessian diagonal at solve time.
    pub reg_delta: f64,
    pub structure: Option<Arc<StageStructure>>,
}

impl QpSubproblem {
    pub fn n_primal(&self) -> usize {
        self.grad.len()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }
}

/// `hess <- hess + delta I`; all other fields unchanged.
pub fn regularize(sub: &QpSubproblem, delta: f64) -> QpSubproblem {
    assert!(delta >= 0.0);
    let mut out = sub.clone();
    for i in 0..out.hess.nrows() {
        out.hess[(i, i)] += delta;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub dw: DVector<f64>,
    pub pi: DVector<f64>,
    pub eta: DVector<f64>,
    pub status: QpStatus,
    pub active_set: Vec<usize>,
    pub iterations: usize,
    /// Worst KKT violation of the returned point (stationarity, primal,
    /// dual, complementarity).
    pub kkt_error: f64,
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("KKT factorization singular; reduced Hessian not positive definite on the working set")]
    SingularKkt,
    #[error("dimension mismatch in subproblem: {0}")]
    Dimension(String),
}

const FEAS_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-10;
const CAP_ALL_AT_ONCE: usize = 60;

struct EqpSolution {
    dw: DVector<f64>,
    pi: DVector<f64>,
    eta: DVector<f64>,
}

enum EqpFailure {
    /// Factorization failed; when the failing pivot maps to a working
    /// inequality row, that row is the suspect to retire.
    Singular { suspect: Option<usize> },
}

enum Consistency {
    Consistent,
    Inconsistent,
}

/// Least-squares test of whether the equality rows plus the working
/// inequality rows admit any solution at all.
fn constraint_consistency(sub: &QpSubproblem, active: &[usize]) -> Consistency {
    let p = sub.n_primal();
    let rows = sub.n_eq() + active.len();
    if rows == 0 {
        return Consistency::Consistent;
    }
    let mut c = DMatrix::zeros(rows, p);
    let mut rhs = DVector::zeros(rows);
    for r in 0..sub.n_eq() {
        for &(col, v) in &sub.eq_jac.rows[r] {
            c[(r, col)] = v;
        }
        rhs[r] = -sub.eq_rhs[r];
    }
    for (a, &row) in active.iter().enumerate() {
        for &(col, v) in &sub.ineq_jac.rows[row] {
            c[(sub.n_eq() + a, col)] = v;
        }
        rhs[sub.n_eq() + a] = -sub.ineq_rhs[row];
    }
    let svd = c.clone().svd(true, true);
    match svd.solve(&rhs, 1e-12) {
        Ok(x) => {
            let resid = (&c * &x - &rhs).amax();
            if resid > 1e-7 * (1.0 + rhs.amax()) {
                Consistency::Inconsistent
            } else {
                Consistency::Consistent
            }
        }
        Err(_) => Consistency::Consistent,
    }
}

fn fnv_hash(active: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &i in active {
        h ^= i as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Solve the subproblem, optionally warmstarted with an initial working set.
pub fn solve_qp(sub: &QpSubproblem, warm: Option<&[usize]>) -> Result<QpSolution, QpError> {
    let p = sub.n_primal();
    let l = sub.n_eq();
    let m = sub.n_ineq();
    if sub.hess.nrows() != p || sub.hess.ncols() != p {
        return Err(QpError::Dimension("hess".into()));
    }
    if sub.eq_jac.nrows() != l || sub.ineq_jac.nrows() != m {
        return Err(QpError::Dimension("jacobian row counts".into()));
    }

    let mut active: Vec<usize> = warm
        .map(|w| {
            let mut v: Vec<usize> = w.iter().copied().filter(|&i| i < m).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .unwrap_or_default();

    // Hessian nonzeros are fixed across working-set changes.
    let hess_triplets = hess_triplets(sub);

    let mut iterations = 0usize;
    let mut singular_events = 0usize;
    let mut seen = Vec::new();
    let mut single_mode = false;
    let mut last: Option<EqpSolution> = None;
    let mut recent_drops: Vec<usize> = Vec::new();
    let cap_single = 3 * (m + l) + 30;
    let cap_total = CAP_ALL_AT_ONCE + cap_single;

    while iterations < cap_total {
        iterations += 1;
        let eqp = match solve_eqp(sub, &hess_triplets, &active) {
            Ok(e) => e,
            Err(EqpFailure::Singular { suspect }) => {
                singular_events += 1;
                if singular_events > m + 16 {
                    // Persistent singularity: either the linearized system is
                    // inconsistent (infeasible) or the reduced Hessian is
                    // genuinely rank-deficient.
                    return match constraint_consistency(sub, &active) {
                        Consistency::Inconsistent => {
                            Ok(finish(sub, last, active, iterations, QpStatus::Infeasible))
                        }
                        Consistency::Consistent => Err(QpError::SingularKkt),
                    };
                }
                // Retire the row the factorization blames, when it names one.
                if let Some(row) = suspect {
                    if let Ok(pos) = active.binary_search(&row) {
                        active.remove(pos);
                        continue;
                    }
                }
                // Otherwise undo the most recent drop: losing a pinning row
                // is the usual way a zero-curvature direction opens up.
                if let Some(back) = recent_drops.pop() {
                    if !active.contains(&back) {
                        let pos = active.binary_search(&back).unwrap_or_else(|e| e);
                        active.insert(pos, back);
                        continue;
                    }
                }
                if active.pop().is_some() {
                    continue;
                }
                return match constraint_consistency(sub, &active) {
                    Consistency::Inconsistent => {
                        Ok(finish(sub, last, active, iterations, QpStatus::Infeasible))
                    }
                    Consistency::Consistent => Err(QpError::SingularKkt),
                };
            }
        };

        let h_lin = sub.ineq_jac.mul_vec(&eqp.dw) + &sub.ineq_rhs;
        let mut is_active = vec![false; m];
        for &i in &active {
            is_active[i] = true;
        }

        let mut violated: Vec<usize> = (0..m)
            .filter(|&i| !is_active[i] && h_lin[i] > FEAS_TOL * (1.0 + sub.ineq_rhs[i].abs()))
            .collect();
        // At most p rows can be active at a nondegenerate solution; adding
        // the whole violated set on a cold start would bloat the working
        // set, so keep the worst offenders (ties by index).
        if violated.len() > p {
            violated.sort_by(|&a, &b| {
                let va = h_lin[a] / (1.0 + sub.ineq_rhs[a].abs());
                let vb = h_lin[b] / (1.0 + sub.ineq_rhs[b].abs());
                vb.partial_cmp(&va).unwrap().then(a.cmp(&b))
            });
            violated.truncate(p);
            violated.sort_unstable();
        }
        let dropped: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| eqp.eta[i] < -DUAL_TOL)
            .collect();

        if violated.is_empty() && dropped.is_empty() {
            last = Some(eqp);
            return Ok(finish(sub, last, active, iterations, QpStatus::Solved));
        }

        if !single_mode {
            let mut next: Vec<usize> = active
                .iter()
                .copied()
                .filter(|i| !dropped.contains(i))
                .collect();
            next.extend(violated.iter().copied());
            next.sort_unstable();
            let h = fnv_hash(&next);
            if seen.contains(&h) || iterations >= CAP_ALL_AT_ONCE {
                single_mode = true;
            } else {
                seen.push(h);
                recent_drops.extend(dropped.iter().copied());
                active = next;
                last = Some(eqp);
                continue;
            }
        }

        // One change at a time, lowest index first: feasibility before
        // dual feasibility.
        if let Some(&add) = violated.first() {
            let pos = active.binary_search(&add).unwrap_or_else(|e| e);
            active.insert(pos, add);
        } else if let Some(&drop) = dropped.first() {
            active.retain(|&i| i != drop);
            recent_drops.push(drop);
        }
        last = Some(eqp);
    }

    Ok(finish(sub, last, active, iterations, QpStatus::MaxIter))
}

fn finish(
    sub: &QpSubproblem,
    last: Option<EqpSolution>,
    active: Vec<usize>,
    iterations: usize,
    status: QpStatus,
) -> QpSolution {
    let (dw, pi, mut eta) = match last {
        Some(e) => (e.dw, e.pi, e.eta),
        None => (
            DVector::zeros(sub.n_primal()),
            DVector::zeros(sub.n_eq()),
            DVector::zeros(sub.n_ineq()),
        ),
    };
    for e in eta.iter_mut() {
        if *e < 0.0 && *e > -DUAL_TOL {
            *e = 0.0;
        }
    }
    let kkt_error = kkt_error(sub, &dw, &pi, &eta);
    QpSolution {
        dw,
        pi,
        eta,
        status,
        active_set: active,
        iterations,
        kkt_error,
    }
}

/// Worst violation over stationarity, equality residual, primal/dual
/// feasibility, and complementarity.
pub fn kkt_error(sub: &QpSubproblem, dw: &DVector<f64>, pi: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    let mut stat = &sub.hess * dw + &sub.grad;
    if sub.reg_delta != 0.0 {
        stat += dw * sub.reg_delta;
    }
    sub.eq_jac.add_tr_mul_vec(pi, 1.0, &mut stat);
    sub.ineq_jac.add_tr_mul_vec(eta, 1.0, &mut stat);
    let mut worst: f64 = stat.amax();
    if sub.n_eq() > 0 {
        worst = worst.max((sub.eq_jac.mul_vec(dw) + &sub.eq_rhs).amax());
    }
    let h_lin = sub.ineq_jac.mul_vec(dw) + &sub.ineq_rhs;
    for i in 0..sub.n_ineq() {
        worst = worst.max(h_lin[i].max(0.0));
        worst = worst.max((-eta[i]).max(0.0));
        worst = worst.max((eta[i] * h_lin[i]).abs());
    }
    worst
}

fn hess_triplets(sub: &QpSubproblem) -> Vec<(usize, usize, f64)> {
    let p = sub.n_primal();
    let mut t = Vec::new();
    for i in 0..p {
        for j in 0..p {
            let v = sub.hess[(i, j)];
            if v != 0.0 {
                t.push((i, j, v));
            }
        }
    }
    t
}

fn solve_eqp(
    sub: &QpSubproblem,
    hess_triplets: &[(usize, usize, f64)],
    active: &[usize],
) -> Result<EqpSolution, EqpFailure> {
    match &sub.structure {
        Some(s) => solve_eqp_banded(sub, hess_triplets, active, s),
        None => solve_eqp_dense(sub, active),
    }
}

fn solve_eqp_dense(sub: &QpSubproblem, active: &[usize]) -> Result<EqpSolution, EqpFailure> {
    let p = sub.n_primal();
    let l = sub.n_eq();
    let k = active.len();
    let n = p + l + k;
    let mut kkt = DMatrix::zeros(n, n);
    for i in 0..p {
        for j in 0..p {
            kkt[(i, j)] = sub.hess[(i, j)];
        }
        kkt[(i, i)] += sub.reg_delta;
    }
    for r in 0..l {
        for &(c, v) in &sub.eq_jac.rows[r] {
            kkt[(p + r, c)] = v;
            kkt[(c, p + r)] = v;
        }
    }
    for (a, &row) in active.iter().enumerate() {
        for &(c, v) in &sub.ineq_jac.rows[row] {
            kkt[(p + l + a, c)] = v;
            kkt[(c, p + l + a)] = v;
        }
    }
    let mut rhs = DVector::zeros(n);
    for i in 0..p {
        rhs[i] = -sub.grad[i];
    }
    for r in 0..l {
        rhs[p + r] = -sub.eq_rhs[r];
    }
    for (a, &row) in active.iter().enumerate() {
        rhs[p + l + a] = -sub.ineq_rhs[row];
    }

    let lu = kkt.clone().full_piv_lu();
    if !lu.is_invertible() {
        return Err(EqpFailure::Singular {
            suspect: dense_dependent_row(sub, active),
        });
    }
    let sol = match lu.solve(&rhs) {
        Some(s) if s.iter().all(|v| v.is_finite()) => s,
        _ => {
            return Err(EqpFailure::Singular {
                suspect: dense_dependent_row(sub, active),
            })
        }
    };
    // one refinement pass
    let resid = &rhs - &kkt * &sol;
    let sol = match lu.solve(&resid) {
        Some(corr) => sol + corr,
        None => sol,
    };
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(EqpFailure::Singular { suspect: None });
    }

    let mut eta = DVector::zeros(sub.n_ineq());
    for (a, &row) in active.iter().enumerate() {
        eta[row] = sol[p + l + a];
    }
    Ok(EqpSolution {
        dw: sol.rows(0, p).into_owned(),
        pi: sol.rows(p, l).into_owned(),
        eta,
    })
}

/// Rank-revealing scan of the stacked constraint rows; returns the
/// highest-index working row that is linearly dependent on the others.
fn dense_dependent_row(sub: &QpSubproblem, active: &[usize]) -> Option<usize> {
    let p = sub.n_primal();
    let l = sub.n_eq();
    let rows = l + active.len();
    if rows == 0 {
        return None;
    }
    let mut m = DMatrix::zeros(rows, p);
    for r in 0..l {
        for &(c, v) in &sub.eq_jac.rows[r] {
            m[(r, c)] = v;
        }
    }
    for (a, &row) in active.iter().enumerate() {
        for &(c, v) in &sub.ineq_jac.rows[row] {
            m[(l + a, c)] = v;
        }
    }
    let (_, perm, rank) = crate::linalg::col_piv_qr(&m.transpose(), 1e-10);
    if rank == rows {
        return None;
    }
    let independent: std::collections::BTreeSet<usize> = perm[..rank].iter().copied().collect();
    (0..active.len())
        .rev()
        .find(|a| !independent.contains(&(l + a)))
        .map(|a| active[a])
}

fn solve_eqp_banded(
    sub: &QpSubproblem,
    hess_triplets: &[(usize, usize, f64)],
    active: &[usize],
    structure: &StageStructure,
) -> Result<EqpSolution, EqpFailure> {
    let p = sub.n_primal();
    let l = sub.n_eq();
    let m = sub.n_ineq();
    let groups = structure.col_groups.len();

    let mut act_by_group: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for &i in active {
        act_by_group[structure.ineq_group[i]].push(i);
    }

    let mut kkt_col = vec![usize::MAX; p];
    let mut kkt_eq = vec![usize::MAX; l];
    let mut kkt_act = vec![usize::MAX; m];
    // Which inequality row (if any) owns each KKT slot, for blame mapping.
    let mut slot_row: Vec<Option<usize>> = Vec::new();
    let mut pos = 0usize;
    for g in 0..groups {
        for c in structure.col_groups[g].clone() {
            kkt_col[c] = pos;
            slot_row.push(None);
            pos += 1;
        }
        for r in structure.eq_groups[g].clone() {
            kkt_eq[r] = pos;
            slot_row.push(None);
            pos += 1;
        }
        for &i in &act_by_group[g] {
            kkt_act[i] = pos;
            slot_row.push(Some(i));
            pos += 1;
        }
    }
    let n = pos;
    debug_assert!(kkt_col.iter().all(|&v| v != usize::MAX));
    debug_assert!(kkt_eq.iter().all(|&v| v != usize::MAX));

    let mut triplets: Vec<(usize, usize, f64)> =
        Vec::with_capacity(hess_triplets.len() + 4 * l + 4 * active.len() + p);
    for &(i, j, v) in hess_triplets {
        triplets.push((kkt_col[i], kkt_col[j], v));
    }
    if sub.reg_delta != 0.0 {
        for c in 0..p {
            triplets.push((kkt_col[c], kkt_col[c], sub.reg_delta));
        }
    }
    for r in 0..l {
        for &(c, v) in &sub.eq_jac.rows[r] {
            triplets.push((kkt_eq[r], kkt_col[c], v));
            triplets.push((kkt_col[c], kkt_eq[r], v));
        }
    }
    for &i in active {
        for &(c, v) in &sub.ineq_jac.rows[i] {
            triplets.push((kkt_act[i], kkt_col[c], v));
            triplets.push((kkt_col[c], kkt_act[i], v));
        }
    }

    let mut rhs = DVector::zeros(n);
    for c in 0..p {
        rhs[kkt_col[c]] = -sub.grad[c];
    }
    for r in 0..l {
        rhs[kkt_eq[r]] = -sub.eq_rhs[r];
    }
    for &i in active {
        rhs[kkt_act[i]] = -sub.ineq_rhs[i];
    }

    let (kl, ku) = bandwidths(&triplets);
    let lu = BandedLu::factor(n, kl, ku, &triplets).map_err(|e| {
        let crate::linalg::BandedError::Singular { col, .. } = e;
        EqpFailure::Singular {
            suspect: slot_row[col],
        }
    })?;
    let mut sol = rhs.clone();
    lu.solve_in_place(&mut sol);
    // two refinement passes over the triplet residual
    for _ in 0..2 {
        let mut resid = rhs.clone();
        for &(i, j, v) in &triplets {
            resid[i] -= v * sol[j];
        }
        let mut corr = resid;
        lu.solve_in_place(&mut corr);
        sol += corr;
    }
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(EqpFailure::Singular { suspect: None });
    }

    let mut dw = DVector::zeros(p);
    for c in 0..p {
        dw[c] = sol[kkt_col[c]];
    }
    let mut pi = DVector::zeros(l);
    for r in 0..l {
        pi[r] = sol[kkt_eq[r]];
    }
    let mut eta = DVector::zeros(m);
    for &i in active {
        eta[i] = sol[kkt_act[i]];
    }
    Ok(EqpSolution { dw, pi, eta })
}

/// Plain-text dump: dimensions header then matrices row by row.
pub fn write_dump<W: IoWrite>(sub: &QpSubproblem, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{} {} {}", sub.n_primal(), sub.n_eq(), sub.n_ineq())?;
    writeln!(out, "{}", sub.reg_delta)?;
    let write_mat = |out: &mut W, m: &DMatrix<f64>| -> std::io::Result<()> {
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
            writeln!(out, "{}", row.join(" "))?;
        }
        Ok(())
    };
    let write_vec = |out: &mut W, v: &DVector<f64>| -> std::io::Result<()> {
        let row: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(out, "{}", row.join(" "))
    };
    write_mat(out, &sub.hess)?;
    write_vec(out, &sub.grad)?;
    write_mat(out, &sub.eq_jac.to_dense())?;
    write_vec(out, &sub.eq_rhs)?;
    write_mat(out, &sub.ineq_jac.to_dense())?;
    write_vec(out, &sub.ineq_rhs)?;
    Ok(())
}
