//! Parameterized optimal control problem in NLP form.
//!
//! Decision vector `w` stacks, stage by stage, the predicted states
//! `xi_1..xi_N`, the L1 penalty slacks, and the inputs `mu_0..mu_{N-1}`;
//! `xi_0` is eliminated by substituting the measured state `x`. The
//! first-order optimality system is the generalized equation
//! `F(z, x) + N_K(z) ∋ 0` with `z = (w, lam, v)`,
//! `F = [grad_w L; -g; -h]`, and `K = R^p x R^l x R^m_{>=0}`.
//!
//! The quadratic objective is scaled by 1/2 internally so the Lagrangian
//! Hessian of the cost equals `blkdiag(Q, R, ..., Qf)` exactly; minimizers
//! and the extracted control are invariant to this scaling. Reported stage
//! costs elsewhere use the unscaled `x'Qx + u'Ru` convention.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::Dynamics;
use crate::invariant_set::Polytope;
use crate::linalg::SparseRows;
use crate::qp::StageStructure;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("input weight R must be positive definite")]
    RNotPositiveDefinite,
    #[error("terminal weight Qf must be positive definite")]
    QfNotPositiveDefinite,
    #[error("state weight Q must be positive semidefinite")]
    QNotPsd,
    #[error("bounds must satisfy lb < ub componentwise (violated at index {0})")]
    BadBounds(usize),
    #[error("penalty weight must be strictly positive")]
    BadPenalty,
    #[error("terminal set must contain the origin strictly (b_f > 0), row {0}")]
    EmptyTerminalSet(usize),
    #[error("soft index {0} out of range")]
    BadSoftIndex(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Problem data prior to assembly.
#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_lb: DVector<f64>,
    pub x_ub: DVector<f64>,
    pub u_lb: DVector<f64>,
    pub u_ub: DVector<f64>,
    /// State indices whose box constraints are softened with L1 slacks.
    pub soft_indices: Vec<usize>,
    pub penalty_rho: f64,
}

/// Column/row bookkeeping for the stacked problem.
#[derive(Clone, Debug)]
pub struct Layout {
    pub nx: usize,
    pub nu: usize,
    /// Slacks per stage (two per softened state).
    pub ns: usize,
    pub horizon: usize,
    stage_w: usize,
}

impl Layout {
    fn new(nx: usize, nu: usize, n_soft: usize, horizon: usize) -> Self {
        Layout {
            nx,
            nu,
            ns: 2 * n_soft,
            horizon,
            stage_w: nx + 2 * n_soft + nu,
        }
    }

    pub fn n_primal(&self) -> usize {
        self.nu + (self.horizon - 1) * self.stage_w + self.nx + self.ns
    }

    pub fn n_eq(&self) -> usize {
        self.horizon * self.nx
    }

    /// Input block of stage `i`, `0 <= i < N`.
    pub fn mu_range(&self, i: usize) -> Range<usize> {
        debug_assert!(i < self.horizon);
        if i == 0 {
            0..self.nu
        } else {
            let s = self.slack_range(i).end;
            s..s + self.nu
        }
    }

    /// State block of stage `i`, `1 <= i <= N`.
    pub fn xi_range(&self, i: usize) -> Range<usize> {
        debug_assert!(i >= 1 && i <= self.horizon);
        let start = self.nu + (i - 1) * self.stage_w;
        start..start + self.nx
    }

    /// Slack block of stage `i`, `1 <= i <= N`.
    pub fn slack_range(&self, i: usize) -> Range<usize> {
        let s = self.xi_range(i).end;
        s..s + self.ns
    }

    /// Equality rows of defect `i` (`xi_{i+1} = f(xi_i, mu_i)`), `0 <= i < N`.
    pub fn defect_range(&self, i: usize) -> Range<usize> {
        (i * self.nx)..((i + 1) * self.nx)
    }

    /// Stage group owning a primal column (0..=N).
    pub fn stage_of_col(&self, c: usize) -> usize {
        if c < self.nu {
            0
        } else {
            (1 + (c - self.nu) / self.stage_w).min(self.horizon)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_primal: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl Dims {
    pub fn total(&self) -> usize {
        self.n_primal + self.n_eq + self.n_ineq
    }
}

/// Cone `K = R^{n_free} x R^{n_nonneg}_{>=0}`.
#[derive(Clone, Copy, Debug)]
pub struct ConeSpec {
    pub n_free: usize,
    pub n_nonneg: usize,
}

/// Projection onto the cone: identity on the free block, clamp at zero on
/// the nonnegative block.
pub fn project_cone(v: &DVector<f64>, cone: &ConeSpec) -> DVector<f64> {
    assert_eq!(v.len(), cone.n_free + cone.n_nonneg);
    let mut out = v.clone();
    for i in cone.n_free..v.len() {
        if out[i] < 0.0 {
            out[i] = 0.0;
        }
    }
    out
}

/// Primal-dual iterate `z = (w, lam, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualPoint {
    pub w: DVector<f64>,
    pub lam: DVector<f64>,
    pub v: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn zeros(dims: &Dims) -> Self {
        PrimalDualPoint {
            w: DVector::zeros(dims.n_primal),
            lam: DVector::zeros(dims.n_eq),
            v: DVector::zeros(dims.n_ineq),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.w.len() + self.lam.len() + self.v.len());
        out.rows_mut(0, self.w.len()).copy_from(&self.w);
        out.rows_mut(self.w.len(), self.lam.len()).copy_from(&self.lam);
        out.rows_mut(self.w.len() + self.lam.len(), self.v.len())
            .copy_from(&self.v);
        out
    }

    pub fn from_vector(vec: &DVector<f64>, dims: &Dims) -> Self {
        assert_eq!(vec.len(), dims.total());
        PrimalDualPoint {
            w: vec.rows(0, dims.n_primal).into_owned(),
            lam: vec.rows(dims.n_primal, dims.n_eq).into_owned(),
            v: vec.rows(dims.n_primal + dims.n_eq, dims.n_ineq).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w.norm_squared() + self.lam.norm_squared() + self.v.norm_squared()).sqrt()
    }
}

/// Classification of an inequality row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    SoftUpper { stage: usize, state: usize },
    SoftLower { stage: usize, state: usize },
    SlackNonneg { stage: usize, slack: usize },
    HardUpper { stage: usize, state: usize },
    HardLower { stage: usize, state: usize },
    InputUpper { stage: usize, input: usize },
    InputLower { stage: usize, input: usize },
    Terminal { row: usize },
}

/// Assembled problem instance. Immutable after construction; all
/// evaluations are pure.
pub struct OcpInstance {
    pub spec: OcpSpec,
    pub qf: DMatrix<f64>,
    pub terminal_set: Polytope,
    pub dynamics: Arc<dyn Dynamics>,
    pub layout: Layout,
    pub soft_indices: Vec<usize>,
    pub hard_indices: Vec<usize>,
    pub dims: Dims,
    ineq: SparseRows,
    ineq_b: DVector<f64>,
    row_kinds: Vec<RowKind>,
    row_stage: Vec<usize>,
    structure: Arc<StageStructure>,
}

/// Per-stage Jacobians of the discrete dynamics along a primal point.
pub struct StageJacobians {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl OcpInstance {
    pub fn build(
        spec: OcpSpec,
        dynamics: Arc<dyn Dynamics>,
        qf: DMatrix<f64>,
        terminal_set: Polytope,
    ) -> Result<Self, OcpError> {
        let nx = dynamics.state_dim();
        let nu = dynamics.input_dim();
        let n = spec.horizon;
        if n < 1 {
            return Err(OcpError::InvalidHorizon);
        }
        if spec.q.nrows() != nx || spec.q.ncols() != nx {
            return Err(OcpError::Dimension(format!(
                "Q is {}x{}, expected {nx}x{nx}",
                spec.q.nrows(),
                spec.q.ncols()
            )));
        }
        if spec.r.nrows() != nu || spec.r.ncols() != nu {
            return Err(OcpError::Dimension(format!(
                "R is {}x{}, expected {nu}x{nu}",
                spec.r.nrows(),
                spec.r.ncols()
            )));
        }
        if spec.r.clone().cholesky().is_none() {
            return Err(OcpError::RNotPositiveDefinite);
        }
        if qf.clone().cholesky().is_none() {
            return Err(OcpError::QfNotPositiveDefinite);
        }
        let q_min_eig = nalgebra::SymmetricEigen::new(spec.q.clone())
            .eigenvalues
            .min();
        if q_min_eig < -1e-10 {
            return Err(OcpError::QNotPsd);
        }
        if !(spec.penalty_rho > 0.0) {
            return Err(OcpError::BadPenalty);
        }
        for j in 0..nx {
            if !(spec.x_lb[j] < spec.x_ub[j]) {
                return Err(OcpError::BadBounds(j));
            }
        }
        for j in 0..nu {
            if !(spec.u_lb[j] < spec.u_ub[j]) {
                return Err(OcpError::BadBounds(nx + j));
            }
        }
        let mut soft = spec.soft_indices.clone();
        soft.sort_unstable();
        soft.dedup();
        if let Some(&bad) = soft.iter().find(|&&j| j >= nx) {
            return Err(OcpError::BadSoftIndex(bad));
        }
        let hard: Vec<usize> = (0..nx).filter(|j| !soft.contains(j)).collect();
        if terminal_set.nrows() > 0 && terminal_set.dim() != nx {
            return Err(OcpError::Dimension("terminal set dimension".into()));
        }
        for r in 0..terminal_set.nrows() {
            if !(terminal_set.b[r] > 0.0) {
                return Err(OcpError::EmptyTerminalSet(r));
            }
        }

        let layout = Layout::new(nx, nu, soft.len(), n);
        let p = layout.n_primal();

        // Inequality rows: h(w) = A w - b <= 0, grouped by stage.
        let mut ineq = SparseRows::new(p);
        let mut ineq_b: Vec<f64> = Vec::new();
        let mut row_kinds = Vec::new();
        let mut row_stage = Vec::new();

        let push = |entries: Vec<(usize, f64)>,
                        b: f64,
                        kind: RowKind,
                        stage: usize,
                        ineq: &mut SparseRows,
                        ineq_b: &mut Vec<f64>,
                        row_kinds: &mut Vec<RowKind>,
                        row_stage: &mut Vec<usize>| {
            ineq.push_row(entries);
            ineq_b.push(b);
            row_kinds.push(kind);
            row_stage.push(stage);
        };

        // Stage 0: input box only.
        for j in 0..nu {
            let c = layout.mu_range(0).start + j;
            push(
                vec![(c, 1.0)],
                spec.u_ub[j],
                RowKind::InputUpper { stage: 0, input: j },
                0,
                &mut ineq,
                &mut ineq_b,
                &mut row_kinds,
                &mut row_stage,
            );
            push(
                vec![(c, -1.0)],
                -spec.u_lb[j],
                RowKind::InputLower { stage: 0, input: j },
                0,
                &mut ineq,
                &mut ineq_b,
                &mut row_kinds,
                &mut row_stage,
            );
        }

        // Hard bound rows at the terminal stage, for terminal-row dedup below.
        let mut terminal_hard_rows: Vec<(usize, f64, f64)> = Vec::new();

        for i in 1..=n {
            let xi = layout.xi_range(i);
            let sl = layout.slack_range(i);
            for (k, &j) in soft.iter().enumerate() {
                push(
                    vec![(xi.start + j, 1.0), (sl.start + 2 * k, -1.0)],
                    spec.x_ub[j],
                    RowKind::SoftUpper { stage: i, state: j },
                    i,
                    &mut ineq,
                    &mut ineq_b,
                    &mut row_kinds,
                    &mut row_stage,
                );
                push(
                    vec![(xi.start + j, -1.0), (sl.start + 2 * k + 1, -1.0)],
                    -spec.x_lb[j],
                    RowKind::SoftLower { stage: i, state: j },
                    i,
                    &mut ineq,
                    &mut ineq_b,
                    &mut row_kinds,
                    &mut row_stage,
                );
            }
            for k in 0..layout.ns {
                push(
                    vec![(sl.start + k, -1.0)],
                    0.0,
                    RowKind::SlackNonneg { stage: i, slack: k },
                    i,
                    &mut ineq,
                    &mut ineq_b,
                    &mut row_kinds,
                    &mut row_stage,
                );
            }
            for &j in &hard {
                push(
                    vec![(xi.start + j, 1.0)],
                    spec.x_ub[j],
                    RowKind::HardUpper { stage: i, state: j },
                    i,
                    &mut ineq,
                    &mut ineq_b,
                    &mut row_kinds,
                    &mut row_stage,
                );
                push(
                    vec![(xi.start + j, -1.0)],
                    -spec.x_lb[j],
                    RowKind::HardLower { stage: i, state: j },
                    i,
                    &mut ineq,
                    &mut ineq_b,
                    &mut row_kinds,
                    &mut row_stage,
                );
                if i == n {
                    terminal_hard_rows.push((j, 1.0, spec.x_ub[j]));
                    terminal_hard_rows.push((j, -1.0, -spec.x_lb[j]));
                }
            }
            if i <= n - 1 {
                let mu = layout.mu_range(i);
                for j in 0..nu {
                    push(
                        vec![(mu.start + j, 1.0)],
                        spec.u_ub[j],
                        RowKind::InputUpper { stage: i, input: j },
                        i,
                        &mut ineq,
                        &mut ineq_b,
                        &mut row_kinds,
                        &mut row_stage,
                    );
                    push(
                        vec![(mu.start + j, -1.0)],
                        -spec.u_lb[j],
                        RowKind::InputLower { stage: i, input: j },
                        i,
                        &mut ineq,
                        &mut ineq_b,
                        &mut row_kinds,
                        &mut row_stage,
                    );
                }
            }
        }

        // Terminal set rows on xi_N, skipping exact duplicates of the hard
        // bound rows already present at stage N.
        let xi_n = layout.xi_range(n);
        for r in 0..terminal_set.nrows() {
            let mut entries = Vec::new();
            let mut norm_sq = 0.0;
            for c in 0..nx {
                let v = terminal_set.a[(r, c)];
                if v != 0.0 {
                    entries.push((xi_n.start + c, v));
                    norm_sq += v * v;
                }
            }
            if norm_sq == 0.0 {
                continue;
            }
            let norm = norm_sq.sqrt();
            let duplicate = entries.len() == 1
                && terminal_hard_rows.iter().any(|&(j, sgn, b)| {
                    entries[0].0 == xi_n.start + j
                        && (entries[0].1 / norm - sgn).abs() < 1e-9
                        && (terminal_set.b[r] / norm - b).abs() < 1e-9
                });
            if duplicate {
                continue;
            }
            push(
                entries,
                terminal_set.b[r],
                RowKind::Terminal { row: r },
                n,
                &mut ineq,
                &mut ineq_b,
                &mut row_kinds,
                &mut row_stage,
            );
        }

        let dims = Dims {
            n_primal: p,
            n_eq: layout.n_eq(),
            n_ineq: ineq.nrows(),
        };

        // Stage grouping handed to the QP solver for the banded ordering.
        let mut col_groups = vec![layout.mu_range(0)];
        for i in 1..n {
            col_groups.push(layout.xi_range(i).start..layout.mu_range(i).end);
        }
        col_groups.push(layout.xi_range(n).start..p);
        let mut eq_groups: Vec<Range<usize>> = (0..n).map(|i| layout.defect_range(i)).collect();
        eq_groups.push(0..0);
        let structure = Arc::new(StageStructure {
            col_groups,
            eq_groups,
            ineq_group: row_stage.clone(),
        });

        Ok(OcpInstance {
            spec,
            qf,
            terminal_set,
            dynamics,
            layout,
            soft_indices: soft,
            hard_indices: hard,
            dims,
            ineq,
            ineq_b: DVector::from_vec(ineq_b),
            row_kinds,
            row_stage,
            structure,
        })
    }

    pub fn cone_spec(&self) -> ConeSpec {
        ConeSpec {
            n_free: self.dims.n_primal + self.dims.n_eq,
            n_nonneg: self.dims.n_ineq,
        }
    }

    pub fn row_kinds(&self) -> &[RowKind] {
        &self.row_kinds
    }

    pub fn row_stage(&self) -> &[usize] {
        &self.row_stage
    }

    pub fn ineq_rows(&self) -> &SparseRows {
        &self.ineq
    }

    pub fn ineq_offsets(&self) -> &DVector<f64> {
        &self.ineq_b
    }

    pub fn stage_structure(&self) -> Arc<StageStructure> {
        Arc::clone(&self.structure)
    }

    /// h(w) = A w - b.
    pub fn eval_ineq(&self, w: &DVector<f64>) -> DVector<f64> {
        self.ineq.mul_vec(w) - &self.ineq_b
    }

    /// Internal objective: (1/2) quadratic tracking cost plus linear slack
    /// penalty. The constant (1/2) x'Qx term of the eliminated stage is
    /// dropped.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let lay = &self.layout;
        let n = lay.horizon;
        let mut val = 0.0;
        for i in 1..n {
            let xi = w.rows(lay.xi_range(i).start, lay.nx);
            val += 0.5 * (&self.spec.q * &xi).dot(&xi);
        }
        for i in 0..n {
            let mu = w.rows(lay.mu_range(i).start, lay.nu);
            val += 0.5 * (&self.spec.r * &mu).dot(&mu);
        }
        let xi_n = w.rows(lay.xi_range(n).start, lay.nx);
        val += 0.5 * (&self.qf * &xi_n).dot(&xi_n);
        for i in 1..=n {
            let sl = w.rows(lay.slack_range(i).start, lay.ns);
            val += self.spec.penalty_rho * sl.sum();
        }
        val
    }

    /// grad_w of the internal objective.
    pub fn objective_grad(&self, w: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let n = lay.horizon;
        let mut g = DVector::zeros(self.dims.n_primal);
        for i in 1..n {
            let r = lay.xi_range(i);
            let xi = w.rows(r.start, lay.nx);
            g.rows_mut(r.start, lay.nx).copy_from(&(&self.spec.q * &xi));
        }
        for i in 0..n {
            let r = lay.mu_range(i);
            let mu = w.rows(r.start, lay.nu);
            g.rows_mut(r.start, lay.nu).copy_from(&(&self.spec.r * &mu));
        }
        let r = lay.xi_range(n);
        let xi_n = w.rows(r.start, lay.nx);
        g.rows_mut(r.start, lay.nx).copy_from(&(&self.qf * &xi_n));
        for i in 1..=n {
            let r = lay.slack_range(i);
            for c in r {
                g[c] = self.spec.penalty_rho;
            }
        }
        g
    }

    /// State entering defect `i`: the parameter for i = 0, else xi_i.
    fn stage_state(&self, w: &DVector<f64>, x: &DVector<f64>, i: usize) -> DVector<f64> {
        if i == 0 {
            x.clone()
        } else {
            w.rows(self.layout.xi_range(i).start, self.layout.nx)
                .into_owned()
        }
    }

    fn stage_input(&self, w: &DVector<f64>, i: usize) -> DVector<f64> {
        w.rows(self.layout.mu_range(i).start, self.layout.nu)
            .into_owned()
    }

    /// Dynamics defects g(w, x), one block per stage.
    pub fn eval_defects(&self, w: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let mut g = DVector::zeros(self.dims.n_eq);
        for i in 0..lay.horizon {
            let xi_cur = self.stage_state(w, x, i);
            let mu = self.stage_input(w, i);
            let pred = self.dynamics.step(&xi_cur, &mu);
            let next = w.rows(lay.xi_range(i + 1).start, lay.nx);
            let r = lay.defect_range(i);
            for d in 0..lay.nx {
                g[r.start + d] = next[d] - pred[d];
            }
        }
        g
    }

    pub fn stage_jacobians(&self, w: &DVector<f64>, x: &DVector<f64>) -> StageJacobians {
        let n = self.layout.horizon;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n {
            let xi = self.stage_state(w, x, i);
            let mu = self.stage_input(w, i);
            let (ai, bi) = self.dynamics.jacobians(&xi, &mu);
            a.push(ai);
            b.push(bi);
        }
        StageJacobians { a, b }
    }

    /// Recompute the Jacobian pair of one stage in place.
    pub fn refresh_stage_jacobian(
        &self,
        jacs: &mut StageJacobians,
        w: &DVector<f64>,
        x: &DVector<f64>,
        i: usize,
    ) {
        let xi = self.stage_state(w, x, i);
        let mu = self.stage_input(w, i);
        let (ai, bi) = self.dynamics.jacobians(&xi, &mu);
        jacs.a[i] = ai;
        jacs.b[i] = bi;
    }

    /// grad_w g as sparse rows, from cached stage Jacobians.
    pub fn eq_jacobian(&self, jacs: &StageJacobians) -> SparseRows {
        let lay = &self.layout;
        let mut rows = SparseRows::new(self.dims.n_primal);
        for i in 0..lay.horizon {
            let xi_next = lay.xi_range(i + 1);
            let mu = lay.mu_range(i);
            for d in 0..lay.nx {
                let mut entries = Vec::new();
                if i >= 1 {
                    let xi = lay.xi_range(i);
                    for c in 0..lay.nx {
                        let v = -jacs.a[i][(d, c)];
                        if v != 0.0 {
                            entries.push((xi.start + c, v));
                        }
                    }
                }
                for c in 0..lay.nu {
                    let v = -jacs.b[i][(d, c)];
                    if v != 0.0 {
                        entries.push((mu.start + c, v));
                    }
                }
                entries.push((xi_next.start + d, 1.0));
                rows.push_row(entries);
            }
        }
        rows
    }

    /// grad_w L(w, lam, v, x) using cached stage Jacobians.
    pub fn grad_lagrangian(
        &self,
        w: &DVector<f64>,
        lam: &DVector<f64>,
        v: &DVector<f64>,
        jacs: &StageJacobians,
    ) -> DVector<f64> {
        let lay = &self.layout;
        let mut g = self.objective_grad(w);
        for i in 0..lay.horizon {
            let lam_i = lam.rows(lay.defect_range(i).start, lay.nx);
            let xi_next = lay.xi_range(i + 1);
            for d in 0..lay.nx {
                g[xi_next.start + d] += lam_i[d];
            }
            if i >= 1 {
                let xi = lay.xi_range(i);
                let at_l = jacs.a[i].tr_mul(&lam_i.into_owned());
                for c in 0..lay.nx {
                    g[xi.start + c] -= at_l[c];
                }
            }
            let mu = lay.mu_range(i);
            let bt_l = jacs.b[i].tr_mul(&lam_i.into_owned());
            for c in 0..lay.nu {
                g[mu.start + c] -= bt_l[c];
            }
        }
        self.ineq.add_tr_mul_vec(v, 1.0, &mut g);
        g
    }

    /// Full Lagrangian value (used by finite-difference oracles in tests).
    pub fn lagrangian(
        &self,
        w: &DVector<f64>,
        lam: &DVector<f64>,
        v: &DVector<f64>,
        x: &DVector<f64>,
    ) -> f64 {
        self.objective(w) + lam.dot(&self.eval_defects(w, x)) + v.dot(&self.eval_ineq(w))
    }

    /// F(z, x) = [grad_w L; -g; -h].
    pub fn kkt_residual(&self, z: &PrimalDualPoint, x: &DVector<f64>) -> DVector<f64> {
        let jacs = self.stage_jacobians(&z.w, x);
        let grad_l = self.grad_lagrangian(&z.w, &z.lam, &z.v, &jacs);
        let g = self.eval_defects(&z.w, x);
        let h = self.eval_ineq(&z.w);
        let mut out = DVector::zeros(self.dims.total());
        out.rows_mut(0, self.dims.n_primal).copy_from(&grad_l);
        out.rows_mut(self.dims.n_primal, self.dims.n_eq).copy_from(&(-g));
        out.rows_mut(self.dims.n_primal + self.dims.n_eq, self.dims.n_ineq)
            .copy_from(&(-h));
        out
    }

    /// Natural residual pi(z, x) = || z - Pi_K[z - F(z, x)] ||.
    pub fn natural_residual(&self, z: &PrimalDualPoint, x: &DVector<f64>) -> f64 {
        let zv = z.to_vector();
        let f = self.kkt_residual(z, x);
        let proj = project_cone(&(&zv - &f), &self.cone_spec());
        (zv - proj).norm()
    }

    /// Underlying (slack-free) constraint values, negative when satisfied:
    /// state boxes per stage 0..=N (stage 0 at the parameter), input boxes
    /// per stage, then terminal rows.
    pub fn constraint_margins(&self, z: &PrimalDualPoint, x: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let n = lay.horizon;
        let mut m = Vec::new();
        for i in 0..=n {
            let xi = if i == 0 {
                x.clone()
            } else {
                z.w.rows(lay.xi_range(i).start, lay.nx).into_owned()
            };
            for j in 0..lay.nx {
                m.push(xi[j] - self.spec.x_ub[j]);
                m.push(self.spec.x_lb[j] - xi[j]);
            }
        }
        for i in 0..n {
            let mu = self.stage_input(&z.w, i);
            for j in 0..lay.nu {
                m.push(mu[j] - self.spec.u_ub[j]);
                m.push(self.spec.u_lb[j] - mu[j]);
            }
        }
        let xi_n = z.w.rows(lay.xi_range(n).start, lay.nx).into_owned();
        for r in 0..self.terminal_set.nrows() {
            let mut val = -self.terminal_set.b[r];
            for c in 0..lay.nx {
                val += self.terminal_set.a[(r, c)] * xi_n[c];
            }
            m.push(val);
        }
        DVector::from_vec(m)
    }

    /// Inequality rows active at the current primal point; the natural
    /// warmstart when no previous active set is available.
    pub fn active_rows_at(&self, w: &DVector<f64>, tol: f64) -> Vec<usize> {
        let h = self.eval_ineq(w);
        (0..h.len()).filter(|&i| h[i] >= -tol).collect()
    }

    /// Selection of the first input from the stacked primal block.
    pub fn extract_u0(&self, z: &PrimalDualPoint) -> DVector<f64> {
        z.w.rows(self.layout.mu_range(0).start, self.layout.nu)
            .into_owned()
    }

    pub fn slack_values(&self, w: &DVector<f64>) -> DVector<f64> {
        let lay = &self.layout;
        let mut s = Vec::with_capacity(lay.ns * lay.horizon);
        for i in 1..=lay.horizon {
            let r = lay.slack_range(i);
            for c in r {
                s.push(w[c]);
            }
        }
        DVector::from_vec(s)
    }
}

/// Unscaled tracking stage cost `x'Qx + u'Ru` used in reports.
pub fn stage_cost(q: &DMatrix<f64>, r: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    (q * x).dot(x) + (r * u).dot(u)
}
