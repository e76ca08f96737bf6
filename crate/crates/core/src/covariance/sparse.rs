//! Compressed symmetric matrices and an up-looking sparse Cholesky.
//!
//! Storage keeps the lower triangle row by row: row `i` lists the columns
//! `j <= i` that are structurally present, sorted, diagonal last. That is the
//! same layout as the upper triangle by columns, which is what the
//! elimination-tree reach in the factorization wants.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use super::CovarianceError;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetric {
    /// Build from lower-triangle rows given as `(column, value)` lists with `column <= row`.
    /// Duplicates are summed. Rows missing a diagonal get an explicit zero.
    pub fn from_lower_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            let mut has_diag = false;
            for (j, v) in row {
                assert!(j <= i, "entry ({i},{j}) is above the diagonal");
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
                has_diag |= j == i;
            }
            if !has_diag {
                col_idx.push(i);
                values.push(0.0);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Assemble from a fixed pattern: `row_ptr`/`col_idx` must describe sorted
    /// lower-triangle rows ending in their diagonal.
    pub fn from_pattern(row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Self {
        let n = row_ptr.len() - 1;
        debug_assert_eq!(col_idx.len(), values.len());
        debug_assert!((0..n).all(|i| col_idx[row_ptr[i + 1] - 1] == i));
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn identity(n: usize) -> Self {
        Self::from_lower_rows((0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let rows = (0..n)
            .map(|i| {
                (0..=i)
                    .filter(|&j| a[(i, j)] != 0.0 || i == j)
                    .map(|j| (j, a[(i, j)]))
                    .collect()
            })
            .collect();
        Self::from_lower_rows(rows)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the lower triangle, diagonal included.
    pub fn nnz_lower(&self) -> usize {
        self.col_idx.len()
    }

    /// Structural nonzeros of the full symmetric matrix.
    pub fn nnz(&self) -> usize {
        2 * self.nnz_lower() - self.n
    }

    /// `nnz / dim^2`.
    pub fn fill_fraction(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.nnz() as f64 / (self.n as f64 * self.n as f64)
    }

    /// Lower-triangle row `i`: sorted column indices and values.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// Entry `(i, j)` or `None` when structurally absent.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|k| vals[k])
    }

    pub fn is_structural(&self, i: usize, j: usize) -> bool {
        self.get(i, j).is_some()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| *self.values[..self.row_ptr[i + 1]].last().unwrap())
            .collect()
    }

    /// Copy with `shift[i]` added to each diagonal entry.
    pub fn with_diagonal_added(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            out.values[self.row_ptr[i + 1] - 1] += shift[i];
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    /// Symmetric permutation `B[p, q] = A[perm[p], perm[q]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; self.n];
        for (p, &i) in perm.iter().enumerate() {
            inv[i] = p;
        }
        let mut rows = vec![Vec::new(); self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let (a, b) = (inv[i], inv[j]);
                if a >= b {
                    rows[a].push((b, v));
                } else {
                    rows[b].push((a, v));
                }
            }
        }
        Self::from_lower_rows(rows)
    }

    /// Writes the lower triangle in MatrixMarket coordinate format.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz_lower())?;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }

    /// First structurally nonzero column of each lower-triangle row.
    pub fn envelope_starts(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.row(i).0[0]).collect()
    }
}

/// Elimination tree and column pattern of the Cholesky factor; depends only on
/// the sparsity structure, so one analysis serves every numeric refactorization.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    parent: Vec<Option<usize>>,
    col_ptr: Vec<usize>,
}

impl SymbolicCholesky {
    pub fn analyze(a: &SparseSymmetric) -> Self {
        let n = a.dim();
        let parent = elimination_tree(a);
        let mut counts = vec![1usize; n];
        let mut work = ReachWork::new(n);
        for k in 0..n {
            let top = work.reach(a, k, &parent);
            for &j in &work.stack[top..] {
                counts[j] += 1;
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        for c in counts {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        Self { n, parent, col_ptr }
    }

    pub fn nnz(&self) -> usize {
        self.col_ptr[self.n]
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

fn elimination_tree(a: &SparseSymmetric) -> Vec<Option<usize>> {
    let n = a.dim();
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        let (cols, _) = a.row(k);
        for &j in cols {
            let mut i = j;
            while i < k {
                let next = ancestor[i];
                ancestor[i] = Some(k);
                match next {
                    None => {
                        parent[i] = Some(k);
                        break;
                    }
                    Some(nx) => i = nx,
                }
            }
        }
    }
    parent
}

/// Reusable buffers for the elimination-tree reach.
struct ReachWork {
    marks: Vec<usize>,
    path: Vec<usize>,
    stack: Vec<usize>,
}

impl ReachWork {
    fn new(n: usize) -> Self {
        Self {
            marks: vec![usize::MAX; n],
            path: vec![0; n],
            stack: vec![0; n],
        }
    }

    /// Nonzero pattern of row `k` of the factor in topological order, as the
    /// slice `stack[top..]`; returns `top`.
    fn reach(&mut self, a: &SparseSymmetric, k: usize, parent: &[Option<usize>]) -> usize {
        let n = a.dim();
        let mut top = n;
        self.marks[k] = k;
        let (cols, _) = a.row(k);
        for &j in cols {
            if j >= k {
                continue;
            }
            let mut len = 0;
            let mut i = j;
            while self.marks[i] != k {
                self.path[len] = i;
                len += 1;
                self.marks[i] = k;
                match parent[i] {
                    Some(p) => i = p,
                    None => break,
                }
            }
            while len > 0 {
                len -= 1;
                top -= 1;
                self.stack[top] = self.path[len];
            }
        }
        top
    }
}

/// Numeric lower-triangular factor `L` with `L L^T = A`, stored by columns,
/// diagonal first in every column.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CholeskyFactor {
    pub fn factor(a: &SparseSymmetric) -> Result<Self, CovarianceError> {
        let symbolic = SymbolicCholesky::analyze(a);
        Self::factor_with(a, &symbolic)
    }

    pub fn factor_with(a: &SparseSymmetric, sym: &SymbolicCholesky) -> Result<Self, CovarianceError> {
        let n = a.dim();
        assert_eq!(n, sym.n, "symbolic analysis is for a different dimension");
        let nnz = sym.nnz();
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0; nnz];
        let mut next = sym.col_ptr[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut work = ReachWork::new(n);
        for k in 0..n {
            let top = work.reach(a, k, &sym.parent);
            let (cols, vals) = a.row(k);
            for (&j, &v) in cols.iter().zip(vals) {
                x[j] = v;
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &j in &work.stack[top..] {
                let start = sym.col_ptr[j];
                let lkj = x[j] / values[start];
                x[j] = 0.0;
                for p in start + 1..next[j] {
                    x[row_idx[p]] -= values[p] * lkj;
                }
                d -= lkj * lkj;
                let p = next[j];
                if p >= sym.col_ptr[j + 1] {
                    return Err(CovarianceError::Structure(format!(
                        "column {j} overflowed its symbolic count"
                    )));
                }
                row_idx[p] = k;
                values[p] = lkj;
                next[j] += 1;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(CovarianceError::NotPositiveDefinite { pivot: k, value: d });
            }
            let p = next[k];
            row_idx[p] = k;
            values[p] = d.sqrt();
            next[k] += 1;
        }
        Ok(Self {
            n,
            col_ptr: sym.col_ptr.clone(),
            row_idx,
            values,
        })
    }

    /// Factor, retrying once with `jitter` added to the diagonal if the first
    /// attempt hits a non-positive pivot. The input matrix is never modified.
    pub fn factor_with_retry(
        a: &SparseSymmetric,
        sym: &SymbolicCholesky,
        jitter: f64,
    ) -> Result<Self, CovarianceError> {
        match Self::factor_with(a, sym) {
            Ok(f) => Ok(f),
            Err(CovarianceError::NotPositiveDefinite { .. }) if jitter > 0.0 => {
                let shifted = a.with_diagonal_added(&vec![jitter; a.dim()]);
                Self::factor_with(&shifted, sym)
            }
            Err(e) => Err(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n)
            .map(|j| self.values[self.col_ptr[j]].ln())
            .sum::<f64>()
            * 2.0
    }

    /// `L x`.
    pub fn lower_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for j in 0..self.n {
            let xj = x[j];
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_idx[p]] += self.values[p] * xj;
            }
        }
        out
    }

    /// In-place `L y = b`.
    pub fn forward_solve_in_place(&self, b: &mut [f64]) {
        for j in 0..self.n {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let yj = b[j] / self.values[start];
            b[j] = yj;
            if yj != 0.0 {
                for p in start + 1..end {
                    b[self.row_idx[p]] -= self.values[p] * yj;
                }
            }
        }
    }

    /// In-place `L^T x = y`.
    pub fn backward_solve_in_place(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let start = self.col_ptr[j];
            let end = self.col_ptr[j + 1];
            let mut s = y[j];
            for p in start + 1..end {
                s -= self.values[p] * y[self.row_idx[p]];
            }
            y[j] = s / self.values[start];
        }
    }

    /// `A^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_solve_in_place(&mut x);
        self.backward_solve_in_place(&mut x);
        x
    }

    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.solve(b.as_slice()))
    }

    /// `L^{-1} B` column by column.
    pub fn forward_solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            self.forward_solve_in_place(col.as_mut_slice());
        }
        out
    }

    /// Entries `(row, col, value)` of the factor.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |j| {
            (self.col_ptr[j]..self.col_ptr[j + 1]).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.entries() {
            l[(i, j)] = v;
        }
        l
    }

    /// Factor entries in rows `< border_start` that lie left of the row's
    /// first structural nonzero in `a` (fill outside the variable band).
    pub fn fill_outside_envelope(&self, a: &SparseSymmetric, border_start: usize) -> usize {
        let starts = a.envelope_starts();
        self.entries()
            .filter(|&(i, j, _)| i < border_start && j < starts[i])
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, density: f64, seed: u64) -> SparseSymmetric {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = vec![Vec::new(); n];
        let mut diag = vec![1.0; n];
        for i in 0..n {
            for j in 0..i {
                if rng.gen::<f64>() < density {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    rows[i].push((j, v));
                    diag[i] += v.abs();
                    diag[j] += v.abs();
                }
            }
        }
        for i in 0..n {
            rows[i].push((i, diag[i]));
        }
        SparseSymmetric::from_lower_rows(rows)
    }

    #[test]
    fn identity_factor() {
        let a = SparseSymmetric::identity(6);
        let f = CholeskyFactor::factor(&a).unwrap();
        assert_eq!(f.log_det(), 0.0);
        assert_eq!(f.to_dense(), DMatrix::identity(6, 6));
    }

    #[test]
    fn two_by_two_by_hand() {
        let a = SparseSymmetric::from_dense(&DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]));
        let f = CholeskyFactor::factor(&a).unwrap();
        let l = f.to_dense();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert!((f.log_det() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = SparseSymmetric::from_dense(&DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 1.0],
        ));
        match CholeskyFactor::factor(&a) {
            Err(CovarianceError::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matches_dense_factorization() {
        for seed in 0..5 {
            let a = random_spd(50, 0.08, seed);
            let f = CholeskyFactor::factor(&a).unwrap();
            let dense = a.to_dense();
            let chol = dense.clone().cholesky().unwrap();
            let dense_logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            assert!(((f.log_det() - dense_logdet) / dense_logdet).abs() < 1e-12);
            let l = f.to_dense();
            assert!((&l * l.transpose() - &dense).amax() < 1e-12);
            let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
            let x = f.solve(&b);
            let r = a.mul_vec(&x);
            let res: f64 = r.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(res / nb < 1e-12);
        }
    }

    #[test]
    fn retry_adds_jitter_without_touching_input() {
        let dense = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let a = SparseSymmetric::from_dense(&dense);
        let sym = SymbolicCholesky::analyze(&a);
        assert!(CholeskyFactor::factor_with(&a, &sym).is_err());
        let f = CholeskyFactor::factor_with_retry(&a, &sym, 1e-8).unwrap();
        assert!(f.log_det().is_finite());
        assert_eq!(a.to_dense(), dense);
    }

    #[test]
    fn banded_matrix_has_no_fill_outside_band() {
        let n = 40;
        let rows = (0..n)
            .map(|i| {
                let lo = (i as usize).saturating_sub(3);
                (lo..=i).map(|j| (j, if i == j { 4.0 } else { 0.5 })).collect()
            })
            .collect();
        let a = SparseSymmetric::from_lower_rows(rows);
        let f = CholeskyFactor::factor(&a).unwrap();
        assert_eq!(f.fill_outside_envelope(&a, n), 0);
        assert_eq!(f.nnz(), a.nnz_lower());
    }

    #[test]
    fn permutation_and_mul_agree_with_dense() {
        let a = random_spd(12, 0.3, 9);
        let perm: Vec<usize> = (0..12).rev().collect();
        let b = a.permuted(&perm);
        let da = a.to_dense();
        let db = b.to_dense();
        for p in 0..12 {
            for q in 0..12 {
                assert_eq!(db[(p, q)], da[(perm[p], perm[q])]);
            }
        }
        let x: Vec<f64> = (0..12).map(|i| i as f64 - 3.0).collect();
        let y = a.mul_vec(&x);
        let yd = &da * DVector::from_vec(x);
        for i in 0..12 {
            assert!((y[i] - yd[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_market_header() {
        let a = SparseSymmetric::identity(2);
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n"));
    }
}
