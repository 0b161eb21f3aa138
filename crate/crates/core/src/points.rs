//! Row-major point sets and pairwise-distance kernels.

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

/// N points of dimension d, stored row-major (one contiguous slice per point).
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * dim, "point data length must be n * dim");
        Self { n, dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            assert_eq!(r.len(), dim, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (n, dim) = m.shape();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            data.extend(m.row(i).iter());
        }
        Self::new(n, dim, data)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.n)
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.data)
    }

    /// d × N column-major view: column j is point j.
    pub(crate) fn columns_view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.data, self.dim, self.n)
    }

    pub fn sq_norms(&self) -> Vec<f64> {
        self.rows().map(|r| r.iter().map(|v| v * v).sum()).collect()
    }

    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        sq_dist(self.row(i), self.row(j))
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.sq_dist(i, j).sqrt()
    }

    /// Squared distances from points `block` to every point, via one GEMM.
    /// Returned matrix is |block| × N. Cancellation error is O(eps·‖x‖²);
    /// callers that need exact ordering re-evaluate candidates with [`sq_dist`].
    pub fn block_sq_dists(&self, block: std::ops::Range<usize>, norms: &[f64]) -> DMatrix<f64> {
        let all = self.columns_view();
        let rows = all.columns(block.start, block.len());
        let gram = rows.transpose() * all;
        let mut out = gram;
        for (jj, col) in out.column_iter_mut().enumerate() {
            for (ii, v) in col.into_iter().enumerate() {
                let d = norms[block.start + ii] + norms[jj] - 2.0 * *v;
                *v = d.max(0.0);
            }
        }
        out
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-block size used by blocked all-pairs passes.
pub(crate) const BLOCK: usize = 256;

/// Apply `f(block_start, block_sq_dists)` over row blocks in parallel and
/// collect the per-block results in block order.
pub(crate) fn for_each_block<T, F>(points: &PointSet, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &DMatrix<f64>) -> T + Sync,
{
    let norms = points.sq_norms();
    let n = points.len();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    starts
        .into_par_iter()
        .map(|s| {
            let e = (s + BLOCK).min(n);
            let d = points.block_sq_dists(s..e, &norms);
            f(s, &d)
        })
        .collect()
}
