//! Polyhedral sets and the maximal admissible invariant set of a stable
//! linear closed loop.
//!
//! The recursion intersects the constraint polytope with its preimages under
//! the closed-loop map, terminating when every propagated row is redundant
//! (each checked by a small LP) or at the iteration cap.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::SparseRows;
use crate::par::maybe_par_map;
use crate::qp::{solve_qp, QpStatus, QpSubproblem};

/// `{ x : A x <= b }`.
#[derive(Clone, Debug)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        assert_eq!(a.nrows(), b.len());
        Polytope { a, b }
    }

    pub fn empty(dim: usize) -> Self {
        Polytope {
            a: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
        }
    }

    /// Axis-aligned box `lb <= x <= ub`.
    pub fn from_box(lb: &DVector<f64>, ub: &DVector<f64>) -> Self {
        let n = lb.len();
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for j in 0..n {
            a[(2 * j, j)] = 1.0;
            b[2 * j] = ub[j];
            a[(2 * j + 1, j)] = -1.0;
            b[2 * j + 1] = -lb[j];
        }
        Polytope { a, b }
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.a.row(i).transpose()
    }

    pub fn push_row(&mut self, row: &DVector<f64>, offset: f64) {
        let mut a = DMatrix::zeros(self.nrows() + 1, self.dim());
        a.view_mut((0, 0), (self.nrows(), self.dim())).copy_from(&self.a);
        a.row_mut(self.nrows()).copy_from(&row.transpose());
        let mut b = DVector::zeros(self.nrows() + 1);
        b.rows_mut(0, self.nrows()).copy_from(&self.b);
        b[self.nrows()] = offset;
        self.a = a;
        self.b = b;
    }

    /// Scale every row to unit norm. Zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.nrows() {
            let n = self.a.row(i).norm();
            if n > 1e-300 {
                for j in 0..self.dim() {
                    self.a[(i, j)] /= n;
                }
                self.b[i] /= n;
            }
        }
    }

    /// Drop rows identical (after normalization) to an earlier row.
    pub fn dedup_rows(&mut self, tol: f64) {
        let mut keep: Vec<usize> = Vec::new();
        for i in 0..self.nrows() {
            let dup = keep.iter().any(|&k| {
                (self.a.row(i) - self.a.row(k)).amax() <= tol && (self.b[i] - self.b[k]).abs() <= tol
            });
            if !dup {
                keep.push(i);
            }
        }
        if keep.len() != self.nrows() {
            let a = DMatrix::from_fn(keep.len(), self.dim(), |r, c| self.a[(keep[r], c)]);
            let b = DVector::from_fn(keep.len(), |r, _| self.b[keep[r]]);
            self.a = a;
            self.b = b;
        }
    }

    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.nrows() {
            worst = worst.max(self.a.row(i).transpose().dot(x) - self.b[i]);
        }
        worst
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.nrows() == 0 || self.max_violation(x) <= tol
    }

    /// Point on the boundary along a random direction. None when the set is
    /// unbounded in that direction.
    pub fn sample_boundary(&self, rng: &mut ChaCha12Rng) -> Option<DVector<f64>> {
        let mut dir = DVector::from_fn(self.dim(), |_, _| {
            let v: f64 = StandardNormal.sample(rng);
            v
        });
        let norm = dir.norm();
        if norm < 1e-12 {
            return None;
        }
        dir /= norm;
        let mut alpha = f64::INFINITY;
        for i in 0..self.nrows() {
            let denom = self.a.row(i).transpose().dot(&dir);
            if denom > 1e-12 {
                alpha = alpha.min(self.b[i] / denom);
            }
        }
        if alpha.is_finite() {
            Some(dir * alpha)
        } else {
            None
        }
    }
}

#[derive(Debug, Error)]
pub enum LpError {
    #[error("objective unbounded over the polytope")]
    Unbounded,
}

#[derive(Debug, Error)]
pub enum InvariantSetError {
    #[error("closed-loop matrix is not Schur stable (spectral radius {0:.6})")]
    NotSchurStable(f64),
    #[error("constraints do not bound the recursion")]
    Unbounded,
    #[error("constraint polytopes have mismatched dimensions")]
    Dimension,
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// True iff `max { row . x : x in poly } <= offset` (with a small slack).
///
/// Exactly duplicated or scale-dominated rows are recognized first. The LP
/// itself is solved as a strongly convex QP with a tiny proximal term
/// through the same active-set machinery as the control subproblems; the
/// returned active set is then polished into an exact vertex whenever it
/// pins one, so the redundancy decision does not depend on the proximal
/// weight. Uncertain (degenerate-face) rows are kept.
pub fn lp_redundancy_check(
    poly: &Polytope,
    row: &DVector<f64>,
    offset: f64,
) -> Result<bool, LpError> {
    let n = poly.dim();
    assert_eq!(row.len(), n);

    // Structural scan: same direction with an offset at most ours.
    let row_norm = row.norm();
    if row_norm > 1e-300 {
        let dir = row / row_norm;
        let off_n = offset / row_norm;
        for i in 0..poly.nrows() {
            let ai = poly.a.row(i).transpose();
            let ai_norm = ai.norm();
            if ai_norm <= 1e-300 {
                continue;
            }
            if (&ai / ai_norm - &dir).amax() <= 1e-12 && poly.b[i] / ai_norm <= off_n + 1e-12 {
                return Ok(true);
            }
        }
    }

    const EPS: f64 = 1e-12;
    let mut ineq = SparseRows::new(n);
    for i in 0..poly.nrows() {
        let mut entries = Vec::new();
        for j in 0..n {
            let v = poly.a[(i, j)];
            if v != 0.0 {
                entries.push((j, v));
            }
        }
        ineq.push_row(entries);
    }
    let sub = QpSubproblem {
        hess: DMatrix::identity(n, n) * EPS,
        grad: -row.clone(),
        eq_jac: SparseRows::new(n),
        eq_rhs: DVector::zeros(0),
        ineq_jac: ineq,
        ineq_rhs: -poly.b.clone(),
        reg_delta: 0.0,
        structure: None,
    };
    let sol = match solve_qp(&sub, None) {
        Ok(s) => s,
        Err(_) => return Ok(false),
    };
    if sol.status != QpStatus::Solved {
        return Ok(false);
    }
    if sol.dw.norm() > 1e8 {
        return Err(LpError::Unbounded);
    }

    // Exact vertex polish: solve the active face for the maximizer.
    let k = sol.active_set.len();
    if k > 0 {
        let mut c = DMatrix::zeros(k, n);
        let mut rhs = DVector::zeros(k);
        for (r, &i) in sol.active_set.iter().enumerate() {
            c.row_mut(r).copy_from(&poly.a.row(i));
            rhs[r] = poly.b[i];
        }
        let svd = c.clone().svd(true, true);
        if svd.rank(1e-10) == n {
            if let Ok(x) = svd.solve(&rhs, 1e-10) {
                if (&c * &x - &rhs).amax() < 1e-8 {
                    return Ok(row.dot(&x) <= offset + 1e-9);
                }
            }
        }
    }
    // Degenerate face: the proximal solution underestimates the maximum by
    // at most (EPS/2) R^2, so only a clear margin certifies redundancy.
    Ok(row.dot(&sol.dw) <= offset - 1e-7)
}

/// O_inf construction output.
#[derive(Clone, Debug)]
pub struct MaxAdmissibleResult {
    pub set: Polytope,
    pub iterations: usize,
    /// False when the cap stopped the recursion before certification.
    pub certified: bool,
}

/// Maximal admissible positively invariant set of `x+ = A_cl x` inside the
/// intersection of the state constraints and the gain-mapped input
/// constraints.
pub fn max_admissible_set(
    a_cl: &DMatrix<f64>,
    state_constraints: &Polytope,
    input_constraints: &Polytope,
    cap: usize,
) -> Result<MaxAdmissibleResult, InvariantSetError> {
    let n = a_cl.nrows();
    if state_constraints.dim() != n || (input_constraints.nrows() > 0 && input_constraints.dim() != n)
    {
        return Err(InvariantSetError::Dimension);
    }
    let rho = spectral_radius(a_cl);
    if rho >= 1.0 - 1e-9 {
        return Err(InvariantSetError::NotSchurStable(rho));
    }

    let mut base = Polytope {
        a: DMatrix::from_fn(
            state_constraints.nrows() + input_constraints.nrows(),
            n,
            |i, j| {
                if i < state_constraints.nrows() {
                    state_constraints.a[(i, j)]
                } else {
                    input_constraints.a[(i - state_constraints.nrows(), j)]
                }
            },
        ),
        b: DVector::from_fn(state_constraints.nrows() + input_constraints.nrows(), |i, _| {
            if i < state_constraints.nrows() {
                state_constraints.b[i]
            } else {
                input_constraints.b[i - state_constraints.nrows()]
            }
        }),
    };
    base.normalize_rows();
    base.dedup_rows(1e-9);

    let mut set = base.clone();
    let mut a_pow = DMatrix::identity(n, n);
    for t in 0..cap {
        a_pow = &a_pow * a_cl;
        let mut candidates = Vec::new();
        for i in 0..base.nrows() {
            let mut row = (base.a.row(i) * &a_pow).transpose();
            let mut offset = base.b[i];
            let norm = row.norm();
            if norm <= 1e-12 {
                continue; // zero row with positive offset is trivially redundant
            }
            row /= norm;
            offset /= norm;
            candidates.push((row, offset));
        }

        let current = set.clone();
        let verdicts = maybe_par_map(candidates.clone(), move |(row, offset)| {
            lp_redundancy_check(&current, &row, offset)
        });

        let mut added = 0usize;
        for ((row, offset), verdict) in candidates.into_iter().zip(verdicts) {
            match verdict {
                Ok(true) => {}
                Ok(false) => {
                    set.push_row(&row, offset);
                    added += 1;
                }
                Err(LpError::Unbounded) => return Err(InvariantSetError::Unbounded),
            }
        }
        set.dedup_rows(1e-9);
        if added == 0 {
            return Ok(MaxAdmissibleResult {
                set,
                iterations: t + 1,
                certified: true,
            });
        }
    }
    Ok(MaxAdmissibleResult {
        set,
        iterations: cap,
        certified: false,
    })
}

/// Boundary-sampling validation of invariance and admissibility.
#[derive(Clone, Debug)]
pub struct SamplingReport {
    pub samples: usize,
    pub invariance_violations: usize,
    pub admissibility_violations: usize,
    pub max_invariance_violation: f64,
    pub max_admissibility_violation: f64,
}

pub fn validate_by_sampling(
    set: &Polytope,
    a_cl: &DMatrix<f64>,
    admissible: &Polytope,
    samples: usize,
    seed: u64,
) -> SamplingReport {
    let points: Vec<u64> = (0..samples as u64).collect();
    let results = maybe_par_map(points, |i| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(i.wrapping_mul(0x9E3779B97F4A7C15)));
        match set.sample_boundary(&mut rng) {
            Some(x) => {
                let inv = set.max_violation(&(a_cl * &x));
                let adm = admissible.max_violation(&x);
                (inv, adm)
            }
            None => (f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    });
    let mut report = SamplingReport {
        samples,
        invariance_violations: 0,
        admissibility_violations: 0,
        max_invariance_violation: f64::NEG_INFINITY,
        max_admissibility_violation: f64::NEG_INFINITY,
    };
    for (inv, adm) in results {
        report.max_invariance_violation = report.max_invariance_violation.max(inv);
        report.max_admissibility_violation = report.max_admissibility_violation.max(adm);
        if inv > 1e-9 {
            report.invariance_violations += 1;
        }
        if adm > 1e-9 {
            report.admissibility_violations += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(n: usize) -> Polytope {
        Polytope::from_box(
            &DVector::from_element(n, -1.0),
            &DVector::from_element(n, 1.0),
        )
    }

    #[test]
    fn duplicate_row_is_redundant() {
        let p = unit_box(2);
        let row = DVector::from_vec(vec![1.0, 0.0]);
        assert!(lp_redundancy_check(&p, &row, 1.0).unwrap());
    }

    #[test]
    fn dominated_row_is_redundant() {
        let p = unit_box(2);
        let row = DVector::from_vec(vec![1.0, 0.0]);
        assert!(lp_redundancy_check(&p, &row, 2.0).unwrap());
    }

    #[test]
    fn diagonal_cut_of_unit_box() {
        // max x1 + x2 over the unit box is 2, below 3.
        let p = unit_box(2);
        let row = DVector::from_vec(vec![1.0, 1.0]);
        assert!(lp_redundancy_check(&p, &row, 3.0).unwrap());
        assert!(!lp_redundancy_check(&p, &row, 1.5).unwrap());
    }

    #[test]
    fn unbounded_direction_reported() {
        // Single halfspace: x1 <= 1 leaves x2 free.
        let p = Polytope::new(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
        );
        let row = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            lp_redundancy_check(&p, &row, 1.0),
            Err(LpError::Unbounded)
        ));
    }

    #[test]
    fn deadbeat_terminates_in_one_iteration() {
        let a_cl = DMatrix::zeros(2, 2);
        let state = unit_box(2);
        let res = max_admissible_set(&a_cl, &state, &Polytope::empty(2), 50).unwrap();
        assert!(res.certified);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.set.nrows(), 4);
    }

    #[test]
    fn scalar_contraction_keeps_base_interval() {
        let a_cl = DMatrix::from_row_slice(1, 1, &[0.5]);
        let state = unit_box(1);
        let res = max_admissible_set(&a_cl, &state, &Polytope::empty(1), 50).unwrap();
        assert!(res.certified);
        assert_eq!(res.set.nrows(), 2);
        // still exactly |x| <= 1 after normalization
        let x = DVector::from_vec(vec![1.0]);
        assert!(res.set.max_violation(&x).abs() < 1e-12);
    }

    #[test]
    fn rotation_contraction_is_invariant_by_sampling() {
        let c = 0.9;
        let theta = 0.4f64;
        let a_cl = DMatrix::from_row_slice(
            2,
            2,
            &[
                c * theta.cos(),
                -c * theta.sin(),
                c * theta.sin(),
                c * theta.cos(),
            ],
        );
        let state = unit_box(2);
        let res = max_admissible_set(&a_cl, &state, &Polytope::empty(2), 200).unwrap();
        assert!(res.certified);
        let report = validate_by_sampling(&res.set, &a_cl, &state, 2000, 7);
        assert_eq!(report.invariance_violations, 0);
        assert_eq!(report.admissibility_violations, 0);
    }

    #[test]
    fn rejects_unstable_map() {
        let a_cl = DMatrix::from_row_slice(1, 1, &[1.01]);
        assert!(matches!(
            max_admissible_set(&a_cl, &unit_box(1), &Polytope::empty(1), 10),
            Err(InvariantSetError::NotSchurStable(_))
        ));
    }

    #[test]
    fn unbounded_recursion_detected() {
        // Constraint only on x1; rotation mixes in the unconstrained x2.
        let a_cl = DMatrix::from_row_slice(2, 2, &[0.0, 0.9, 0.9, 0.0]);
        let state = Polytope::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(matches!(
            max_admissible_set(&a_cl, &state, &Polytope::empty(2), 10),
            Err(InvariantSetError::Unbounded)
        ));
    }

    #[test]
    fn boundary_samples_lie_on_boundary() {
        let p = unit_box(3);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = p.sample_boundary(&mut rng).unwrap();
            let v = p.max_violation(&x);
            assert!(v.abs() < 1e-9, "violation {v}");
        }
    }
}
