//! Sparse row lists and a banded LU factorization.
//!
//! The stage-structured KKT systems solved per active-set iteration are
//! block-banded once rows and columns are interleaved by stage, so a band
//! factorization with partial pivoting (the extra `kl` superdiagonals hold
//! pivoting fill-in) replaces a dense solve.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Row-major sparse matrix: each row is a sorted list of `(col, value)`.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        SparseRows {
            ncols,
            rows: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, mut entries: Vec<(usize, f64)>) {
        entries.sort_by_key(|e| e.0);
        debug_assert!(entries.iter().all(|e| e.0 < self.ncols));
        self.rows.push(entries);
    }

    pub fn row_dot(&self, i: usize, x: &DVector<f64>) -> f64 {
        self.rows[i].iter().map(|&(c, v)| v * x[c]).sum()
    }

    /// y = A x
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows(), |i, _| self.row_dot(i, x))
    }

    /// y += alpha * A^T x
    pub fn add_tr_mul_vec(&self, x: &DVector<f64>, alpha: f64, y: &mut DVector<f64>) {
        for (i, row) in self.rows.iter().enumerate() {
            let xi = alpha * x[i];
            if xi != 0.0 {
                for &(c, v) in row {
                    y[c] += v * xi;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                m[(i, c)] = v;
            }
        }
        m
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = SparseRows::new(m.ncols());
        for i in 0..m.nrows() {
            let mut row = Vec::new();
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    row.push((j, m[(i, j)]));
                }
            }
            s.push_row(row);
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum BandedError {
    #[error("singular pivot at column {col} (|p| = {pivot:.3e})")]
    Singular { col: usize, pivot: f64 },
}

/// LU factorization of a band matrix with partial pivoting.
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku_work: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    /// Factor from triplets. `kl`/`ku` are the lower/upper bandwidths of the
    /// assembled matrix; duplicate triplets accumulate.
    pub fn factor(
        n: usize,
        kl: usize,
        ku: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self, BandedError> {
        let ku_work = (ku + kl).min(n.saturating_sub(1));
        let kl = kl.min(n.saturating_sub(1));
        let ldab = kl + ku_work + 1;
        let mut ab = vec![0.0; n * ldab];
        let idx = |i: usize, j: usize| -> usize { j * ldab + (ku_work + i) - j };
        for &(i, j, v) in entries {
            debug_assert!(i < n && j < n);
            debug_assert!(j + kl >= i && i + ku_work >= j, "entry ({i},{j}) outside band");
            ab[idx(i, j)] += v;
        }

        // Column scales for a relative singularity test.
        let mut col_scale = vec![0.0f64; n];
        for j in 0..n {
            let lo = j.saturating_sub(ku_work);
            let hi = (j + kl).min(n - 1);
            for i in lo..=hi {
                col_scale[j] = col_scale[j].max(ab[idx(i, j)].abs());
            }
        }

        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let hi = (j + kl).min(n - 1);
            let mut piv_row = j;
            let mut piv_val = ab[idx(j, j)].abs();
            for i in (j + 1)..=hi {
                let v = ab[idx(i, j)].abs();
                if v > piv_val {
                    piv_val = v;
                    piv_row = i;
                }
            }
            let scale = col_scale[j].max(1e-300);
            if piv_val <= 1e-14 * scale {
                return Err(BandedError::Singular {
                    col: j,
                    pivot: piv_val,
                });
            }
            ipiv[j] = piv_row;
            if piv_row != j {
                let chi = (j + ku_work).min(n - 1);
                for c in j..=chi {
                    ab.swap(idx(j, c), idx(piv_row, c));
                }
            }
            let diag = ab[idx(j, j)];
            for i in (j + 1)..=hi {
                let l = ab[idx(i, j)] / diag;
                ab[idx(i, j)] = l;
                if l != 0.0 {
                    let chi = (j + ku_work).min(n - 1);
                    for c in (j + 1)..=chi {
                        ab[idx(i, c)] -= l * ab[idx(j, c)];
                    }
                }
            }
        }

        Ok(BandedLu {
            n,
            kl,
            ku_work,
            ldab,
            ab,
            ipiv,
        })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.ab[j * self.ldab + (self.ku_work + i) - j]
    }

    pub fn solve_in_place(&self, b: &mut DVector<f64>) {
        let n = self.n;
        // forward: apply pivots and L
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap_rows(j, p);
            }
            let bj = b[j];
            if bj != 0.0 {
                let hi = (j + self.kl).min(n - 1);
                for i in (j + 1)..=hi {
                    b[i] -= self.at(i, j) * bj;
                }
            }
        }
        // backward: U
        for j in (0..n).rev() {
            let lo = j.saturating_sub(self.ku_work);
            b[j] /= self.at(j, j);
            let bj = b[j];
            if bj != 0.0 {
                for i in lo..j {
                    b[i] -= self.at(i, j) * bj;
                }
            }
        }
    }
}

/// Column-pivoted Householder QR. Returns the triangular factor (rows
/// `min(nrows, ncols)` by `ncols`, in pivoted column order), the column
/// permutation, and the numerical rank at the given relative threshold on
/// the diagonal of R.
pub fn col_piv_qr(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, Vec<usize>, usize) {
    let mut a = m.clone();
    let rows = a.nrows();
    let cols = a.ncols();
    let kmax = rows.min(cols);
    let mut perm: Vec<usize> = (0..cols).collect();
    for k in 0..kmax {
        let mut best = k;
        let mut best_norm = 0.0;
        for j in k..cols {
            let nj = a.view((k, j), (rows - k, 1)).norm();
            if nj > best_norm {
                best_norm = nj;
                best = j;
            }
        }
        if best != k {
            a.swap_columns(k, best);
            perm.swap(k, best);
        }
        if best_norm == 0.0 {
            break;
        }
        let mut v = a.view((k, k), (rows - k, 1)).into_owned();
        let alpha = -v[0].signum() * v.norm();
        v[0] -= alpha;
        let vn2 = v.norm_squared();
        if vn2 < 1e-300 {
            continue;
        }
        for j in k..cols {
            let col = a.view((k, j), (rows - k, 1)).into_owned();
            let c = 2.0 * v.dot(&col) / vn2;
            if c != 0.0 {
                for i in 0..rows - k {
                    a[(k + i, j)] -= c * v[i];
                }
            }
        }
        a[(k, k)] = alpha;
        for i in (k + 1)..rows {
            a[(i, k)] = 0.0;
        }
    }
    let r = a.rows(0, kmax).into_owned();
    let r00 = r[(0, 0)].abs().max(1e-300);
    let mut rank = 0;
    for k in 0..kmax {
        if r[(k, k)].abs() > rel_tol * r00 {
            rank += 1;
        } else {
            break;
        }
    }
    (r, perm, rank)
}

/// Numerical row rank of a matrix.
pub fn matrix_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    // QR the orientation with nrows >= ncols for a square-ish R.
    if m.nrows() >= m.ncols() {
        col_piv_qr(m, rel_tol).2
    } else {
        col_piv_qr(&m.transpose(), rel_tol).2
    }
}

/// Orthonormal basis of `{ x : M x = 0 }`.
pub fn kernel_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    let (r, perm, rank) = col_piv_qr(m, rel_tol);
    let nullity = cols - rank;
    let mut basis = DMatrix::zeros(cols, nullity);
    for f in 0..nullity {
        // back-substitute R11 y = -R12 e_f
        let mut y = vec![0.0; rank];
        for i in (0..rank).rev() {
            let mut s = -r[(i, rank + f)];
            for j in (i + 1)..rank {
                s -= r[(i, j)] * y[j];
            }
            y[i] = s / r[(i, i)];
        }
        for i in 0..rank {
            basis[(perm[i], f)] = y[i];
        }
        basis[(perm[rank + f], f)] = 1.0;
    }
    if nullity == 0 {
        return basis;
    }
    let qr = basis.qr();
    qr.q()
}

/// Bandwidths (kl, ku) of a triplet list.
pub fn bandwidths(entries: &[(usize, usize, f64)]) -> (usize, usize) {
    let mut kl = 0usize;
    let mut ku = 0usize;
    for &(i, j, _) in entries {
        if i > j {
            kl = kl.max(i - j);
        } else {
            ku = ku.max(j - i);
        }
    }
    (kl, ku)
}
