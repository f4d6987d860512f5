//! Compressed sparse row storage, the shared-pattern velocity blocks the
//! Galerkin operator is built from, and a thin wrapper over faer's sparse LU.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::MatMut;
use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

/// General CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from (row, col, value) triplets, summing duplicates.
    /// Explicit zeros are kept.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(trips.len());
        let mut values: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut trips = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    trips.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), trips)
    }

    pub(crate) fn from_parts(
        nrows: usize,
        ncols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(indptr.len(), nrows + 1);
        debug_assert_eq!(indices.len(), values.len());
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates the stored entries of row `i` as (column, value).
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.indptr[i]..self.indptr[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[p] * x[self.indices[p]];
            }
            *yi = acc;
        }
    }

    /// `y += alpha A x`.
    pub fn matvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[p] * x[self.indices[p]];
            }
            *yi += alpha * acc;
        }
    }

    /// `y += alpha Aᵀ x`.
    pub fn tmatvec_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let s = alpha * xi;
            for p in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[p]] += s * self.values[p];
            }
        }
    }

    pub fn transpose(&self) -> Self {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                trips.push((j, i, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, trips)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `self + alpha * other` on the union pattern.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut trips = Vec::with_capacity(self.nnz() + other.nnz());
        for i in 0..self.nrows {
            trips.extend(self.row(i).map(|(j, v)| (i, j, v)));
            trips.extend(other.row(i).map(|(j, v)| (i, j, alpha * v)));
        }
        Self::from_triplets(self.nrows, self.ncols, trips)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `max |A - Aᵀ|` over all entries.
    pub fn asymmetry(&self) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let t = self.transpose();
        self.add_scaled(-1.0, &t).max_abs()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                a[(i, j)] += v;
            }
        }
        a
    }

    /// Coordinate-list text: one `row col value` line per stored entry.
    pub fn write_coo<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "% {} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                writeln!(w, "{i} {j} {v:.17e}")?;
            }
        }
        Ok(())
    }

    pub fn lu(&self) -> Result<SparseLu> {
        SparseLu::new(self)
    }
}

/// Sorted sparsity pattern over velocity nodes, shared by every nodal matrix
/// assembled on one mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalPattern {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    diag: Vec<usize>,
}

impl NodalPattern {
    /// Builds the pattern from a list of rows' neighbour sets (must include
    /// the diagonal).
    pub fn from_rows(rows: Vec<Vec<usize>>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut diag = Vec::with_capacity(n);
        for (i, mut r) in rows.into_iter().enumerate() {
            r.sort_unstable();
            r.dedup();
            let d = r.binary_search(&i).expect("pattern row lacks its diagonal");
            diag.push(indices.len() + d);
            indices.extend(r);
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            diag,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Storage position of the diagonal entry of row `i`.
    pub fn diag_pos(&self, i: usize) -> usize {
        self.diag[i]
    }

    /// Storage position of entry (i, j), if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|p| range.start + p)
    }

    pub fn scalar_matrix(&self, values: &[f64]) -> CsrMatrix {
        CsrMatrix::from_parts(
            self.n,
            self.n,
            self.indptr.clone(),
            self.indices.clone(),
            values.to_vec(),
        )
    }
}

/// A velocity-space operator of size `2n x 2n` (component-blocked: all x
/// components, then all y components) whose four scalar sub-blocks share one
/// [`NodalPattern`].
///
/// Laplacian and convection matrices act identically on both components and
/// are stored once; the Newton derivative matrix couples components.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityBlock {
    pattern: Arc<NodalPattern>,
    kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq)]
enum BlockKind {
    Isotropic(Vec<f64>),
    Coupled {
        xx: Vec<f64>,
        xy: Vec<f64>,
        yx: Vec<f64>,
        yy: Vec<f64>,
    },
}

impl VelocityBlock {
    pub fn isotropic(pattern: Arc<NodalPattern>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), pattern.nnz());
        Self {
            pattern,
            kind: BlockKind::Isotropic(values),
        }
    }

    pub fn coupled(
        pattern: Arc<NodalPattern>,
        xx: Vec<f64>,
        xy: Vec<f64>,
        yx: Vec<f64>,
        yy: Vec<f64>,
    ) -> Self {
        let nnz = pattern.nnz();
        assert!([&xx, &xy, &yx, &yy].iter().all(|v| v.len() == nnz));
        Self {
            pattern,
            kind: BlockKind::Coupled { xx, xy, yx, yy },
        }
    }

    pub fn zeros(pattern: Arc<NodalPattern>) -> Self {
        let nnz = pattern.nnz();
        Self::isotropic(pattern, vec![0.0; nnz])
    }

    pub fn pattern(&self) -> &Arc<NodalPattern> {
        &self.pattern
    }

    /// Number of velocity dofs (both components).
    pub fn dim(&self) -> usize {
        2 * self.pattern.n
    }

    pub fn is_coupled(&self) -> bool {
        matches!(self.kind, BlockKind::Coupled { .. })
    }

    /// The four scalar sub-blocks as value arrays (xx, xy, yx, yy).
    pub fn parts(&self) -> [&[f64]; 4] {
        match &self.kind {
            BlockKind::Isotropic(v) => [v, &[], &[], v],
            BlockKind::Coupled { xx, xy, yx, yy } => [xx, xy, yx, yy],
        }
    }

    fn into_coupled(self) -> ([Vec<f64>; 4], Arc<NodalPattern>) {
        let nnz = self.pattern.nnz();
        match self.kind {
            BlockKind::Isotropic(v) => ([v.clone(), vec![0.0; nnz], vec![0.0; nnz], v], self.pattern),
            BlockKind::Coupled { xx, xy, yx, yy } => ([xx, xy, yx, yy], self.pattern),
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Self {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern);
        match (&self.kind, &other.kind) {
            (BlockKind::Isotropic(a), BlockKind::Isotropic(b)) => Self::isotropic(
                self.pattern.clone(),
                a.iter().zip(b).map(|(x, y)| x + alpha * y).collect(),
            ),
            _ => {
                let (mut a, pattern) = self.clone().into_coupled();
                let (b, _) = other.clone().into_coupled();
                for (ai, bi) in a.iter_mut().zip(b.iter()) {
                    ai.iter_mut().zip(bi).for_each(|(x, y)| *x += alpha * y);
                }
                let [xx, xy, yx, yy] = a;
                Self::coupled(pattern, xx, xy, yx, yy)
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        match &mut out.kind {
            BlockKind::Isotropic(v) => v.iter_mut().for_each(|x| *x *= alpha),
            BlockKind::Coupled { xx, xy, yx, yy } => {
                for part in [xx, xy, yx, yy] {
                    part.iter_mut().for_each(|x| *x *= alpha);
                }
            }
        }
        out
    }

    /// `y += alpha F x` for velocity vectors of length `2n`.
    pub fn apply_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        let n = self.pattern.n;
        assert_eq!(x.len(), 2 * n);
        assert_eq!(y.len(), 2 * n);
        let (xx_in, xy_in) = x.split_at(n);
        let (yx_out, yy_out) = y.split_at_mut(n);
        let ip = &self.pattern.indptr;
        let ix = &self.pattern.indices;
        match &self.kind {
            BlockKind::Isotropic(v) => {
                for i in 0..n {
                    let (mut a, mut b) = (0.0, 0.0);
                    for p in ip[i]..ip[i + 1] {
                        let j = ix[p];
                        a += v[p] * xx_in[j];
                        b += v[p] * xy_in[j];
                    }
                    yx_out[i] += alpha * a;
                    yy_out[i] += alpha * b;
                }
            }
            BlockKind::Coupled { xx, xy, yx, yy } => {
                for i in 0..n {
                    let (mut a, mut b) = (0.0, 0.0);
                    for p in ip[i]..ip[i + 1] {
                        let j = ix[p];
                        let (u, w) = (xx_in[j], xy_in[j]);
                        a += xx[p] * u + xy[p] * w;
                        b += yx[p] * u + yy[p] * w;
                    }
                    yx_out[i] += alpha * a;
                    yy_out[i] += alpha * b;
                }
            }
        }
    }

    /// Frobenius inner product `tr(selfᵀ other)` of the full `2n x 2n` matrices.
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        let dot = |a: &[f64], b: &[f64]| -> f64 {
            if a.is_empty() || b.is_empty() {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum()
            }
        };
        let a = self.parts();
        let b = other.parts();
        (0..4).map(|k| dot(a[k], b[k])).sum()
    }

    /// Symmetric Dirichlet elimination: rows and columns of every masked node
    /// (both components) are zeroed and the diagonal set to `diag`.
    pub fn eliminated(&self, mask: &[bool], diag: f64) -> Self {
        let n = self.pattern.n;
        assert_eq!(mask.len(), n);
        let ip = &self.pattern.indptr;
        let ix = &self.pattern.indices;
        let zero_out = |v: &mut [f64], set_diag: bool| {
            for i in 0..n {
                for p in ip[i]..ip[i + 1] {
                    let j = ix[p];
                    if mask[i] || mask[j] {
                        v[p] = if set_diag && i == j { diag } else { 0.0 };
                    }
                }
            }
        };
        let mut out = self.clone();
        match &mut out.kind {
            BlockKind::Isotropic(v) => zero_out(v, true),
            BlockKind::Coupled { xx, xy, yx, yy } => {
                zero_out(xx, true);
                zero_out(yy, true);
                zero_out(xy, false);
                zero_out(yx, false);
            }
        }
        out
    }

    /// Expands to a general `2n x 2n` CSR matrix.
    pub fn to_csr(&self) -> CsrMatrix {
        let n = self.pattern.n;
        let [xx, xy, yx, yy] = self.parts();
        let mut trips = Vec::with_capacity(4 * self.pattern.nnz());
        for i in 0..n {
            for p in self.pattern.indptr[i]..self.pattern.indptr[i + 1] {
                let j = self.pattern.indices[p];
                trips.push((i, j, xx[p]));
                trips.push((n + i, n + j, yy[p]));
                if !xy.is_empty() {
                    trips.push((i, n + j, xy[p]));
                    trips.push((n + i, j, yx[p]));
                }
            }
        }
        CsrMatrix::from_triplets(2 * n, 2 * n, trips)
    }
}

/// Sparse LU factorization with partial pivoting (faer backend), factored
/// once and reused for any number of solves.
#[derive(Debug)]
pub struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl SparseLu {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::Dimension {
                context: "sparse LU (square)",
                expected: a.nrows,
                actual: a.ncols,
            });
        }
        let trips: Vec<Triplet<usize, usize, f64>> = (0..a.nrows)
            .flat_map(|i| a.row(i).map(move |(j, v)| Triplet::new(i, j, v)))
            .collect();
        let csc = SparseColMat::<usize, f64>::try_new_from_triplets(a.nrows, a.ncols, &trips)
            .map_err(|e| Error::Singular(format!("matrix creation failed: {e:?}")))?;
        let symbolic = SymbolicLu::try_new(csc.symbolic())
            .map_err(|e| Error::Singular(format!("symbolic LU failed: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(symbolic, csc.as_ref())
            .map_err(|e| Error::Singular(format!("numeric LU failed: {e:?}")))?;
        Ok(Self { n: a.nrows, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.n);
        self.lu.solve_in_place(MatMut::from_column_major_slice_mut(rhs, self.n, 1));
    }

    /// Solves for `rhs.len() / n` right-hand sides stored contiguously.
    pub fn solve_many_in_place(&self, rhs: &mut [f64]) -> Result<()> {
        check_len("multi-rhs solve", 0, rhs.len() % self.n.max(1))?;
        let k = rhs.len() / self.n;
        if k > 0 {
            self.lu.solve_in_place(MatMut::from_column_major_slice_mut(rhs, self.n, k));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> CsrMatrix {
        CsrMatrix::from_triplets(
            3,
            3,
            vec![(0, 0, 4.0), (0, 1, 1.0), (1, 0, 2.0), (1, 1, 5.0), (2, 2, 3.0), (0, 1, 1.0)],
        )
    }

    #[test]
    fn triplets_merge_duplicates() {
        let a = small();
        assert_eq!(a.nnz(), 5);
        assert_eq!(a.get(0, 1), 2.0);
        assert_eq!(a.get(2, 0), 0.0);
    }

    #[test]
    fn matvec_and_transpose_agree_with_dense() {
        let a = small();
        let d = a.to_dense();
        let x = [1.0, -2.0, 0.5];
        let mut y = [0.0; 3];
        a.matvec(&x, &mut y);
        let yd = &d * nalgebra::DVector::from_column_slice(&x);
        for i in 0..3 {
            assert_relative_eq!(y[i], yd[i]);
        }
        let mut yt = [0.0; 3];
        a.tmatvec_add(1.0, &x, &mut yt);
        let ytd = d.transpose() * nalgebra::DVector::from_column_slice(&x);
        for i in 0..3 {
            assert_relative_eq!(yt[i], ytd[i]);
        }
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn lu_solves() {
        let a = small();
        let lu = a.lu().unwrap();
        let mut b = vec![1.0, 2.0, 3.0, 0.0, 1.0, 0.0];
        let orig = b.clone();
        lu.solve_many_in_place(&mut b).unwrap();
        for c in 0..2 {
            let mut r = [0.0; 3];
            a.matvec(&b[3 * c..3 * c + 3], &mut r);
            for i in 0..3 {
                assert_relative_eq!(r[i], orig[3 * c + i], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn lu_handles_zero_diagonal_saddle() {
        // [[2, 1], [1, 0]] needs pivoting.
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0)]);
        let lu = a.lu().unwrap();
        let mut b = vec![3.0, 1.0];
        lu.solve_in_place(&mut b);
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(b[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn velocity_block_matches_expanded_csr() {
        let pattern = Arc::new(NodalPattern::from_rows(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]));
        let nnz = pattern.nnz();
        let vals = |s: f64| (0..nnz).map(|k| s * (k as f64 + 1.0)).collect::<Vec<_>>();
        let iso = VelocityBlock::isotropic(pattern.clone(), vals(1.0));
        let cpl = VelocityBlock::coupled(pattern, vals(0.5), vals(-0.25), vals(0.125), vals(2.0));
        for blk in [&iso, &cpl, &iso.add_scaled(2.0, &cpl)] {
            let csr = blk.to_csr();
            let x: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
            let mut y1 = vec![0.0; 6];
            let mut y2 = vec![0.0; 6];
            blk.apply_add(1.0, &x, &mut y1);
            csr.matvec(&x, &mut y2);
            for i in 0..6 {
                assert_relative_eq!(y1[i], y2[i], epsilon = 1e-13);
            }
            let fro: f64 = csr.values().iter().map(|v| v * v).sum();
            assert_relative_eq!(blk.frobenius_dot(blk), fro, epsilon = 1e-12);
        }
    }

    #[test]
    fn elimination_gives_identity_rows() {
        let pattern = Arc::new(NodalPattern::from_rows(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]));
        let blk = VelocityBlock::isotropic(pattern.clone(), vec![1.0; pattern.nnz()]);
        let e = blk.eliminated(&[true, false, false], 1.0).to_csr();
        for comp in 0..2 {
            let r = comp * 3;
            let row: Vec<_> = e.row(r).filter(|&(_, v)| v != 0.0).collect();
            assert_eq!(row, vec![(r, 1.0)]);
            assert_eq!(e.get(r + 1, r), 0.0);
        }
    }
}
