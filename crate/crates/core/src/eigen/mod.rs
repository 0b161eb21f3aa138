//! Bottom eigenpairs of symmetric (Laplacian) matrices.
//!
//! Four solvers share one output type: a dense decomposition used as the
//! reference, Lanczos with full reorthogonalization for sparse matrices,
//! Nyström approximation with greedy column selection for dense kernels, and
//! mini-batch Riemannian descent on the Stiefel manifold.

mod dense;
mod lanczos;
mod minibatch;
mod nystrom;
mod symeig;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::CsrMatrix;

pub use dense::{dense_eigh, dense_eigh_capped, DENSE_CAP};
pub use lanczos::lanczos_smallest;
pub use symeig::{symmetric_eigen, tridiagonal_eigen};
pub use minibatch::{minibatch_stiefel, minibatch_stiefel_traced, TraceHistory};
pub use nystrom::{
    nystrom_embed, nystrom_factor, nystrom_laplacian_embedding, ColumnSource, NystromFactor, SelfLoopKernel,
};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("matrix of size {n} exceeds the dense solver cap {cap}; use lanczos, nystrom or minibatch")]
    Size { n: usize, cap: usize },
    #[error("solver failed to converge (residual {residual:e})")]
    Convergence { residual: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid solver budget: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Dense,
    Lanczos,
    Nystrom,
    Minibatch,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Lanczos => "lanczos",
            Self::Nystrom => "nystrom",
            Self::Minibatch => "minibatch",
        })
    }
}

impl FromStr for SolverKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Self::Dense),
            "lanczos" => Ok(Self::Lanczos),
            "nystrom" => Ok(Self::Nystrom),
            "minibatch" => Ok(Self::Minibatch),
            other => Err(format!("unknown solver `{other}`")),
        }
    }
}

/// N × n_eig embedding (row i is the spectral feature of point i) with its
/// eigenvalues in non-descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEmbedding {
    pub vectors: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub solver: SolverKind,
    /// max ‖A q − λ q‖₂ over the returned pairs, when evaluated.
    pub residual: Option<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl SpectralEmbedding {
    pub fn new(vectors: DMatrix<f64>, eigenvalues: Vec<f64>, solver: SolverKind) -> Self {
        assert_eq!(vectors.ncols(), eigenvalues.len());
        Self { vectors, eigenvalues, solver, residual: None, converged: true, warnings: Vec::new() }
    }

    pub fn n_eig(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Flip each column so that its largest-magnitude entry is positive.
    /// Entries within a relative 1e-8 of the maximum count as tied and the
    /// first of them decides, so rounding noise cannot flip the choice.
    pub fn canonicalize_signs(&mut self) {
        for mut col in self.vectors.column_iter_mut() {
            let max = col.amax();
            if let Some(&lead) = col.iter().find(|v| v.abs() >= max * (1.0 - 1e-8)) {
                if lead < 0.0 {
                    col.neg_mut();
                }
            }
        }
    }

    /// max over columns of ‖A q − λ q‖₂.
    pub fn residual_against(&self, op: &(impl SymmetricOperator + ?Sized)) -> f64 {
        let aq = op.apply(&self.vectors);
        (0..self.n_eig())
            .map(|c| (aq.column(c) - self.vectors.column(c) * self.eigenvalues[c]).norm())
            .fold(0.0, f64::max)
    }
}

/// Work limits and seeds for the iterative solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverBudget {
    pub n_eig: usize,
    /// Lanczos Krylov dimension / mini-batch step count.
    pub n_iter: usize,
    /// Nyström column count; `None` derives it from the matrix size.
    pub l_col: Option<usize>,
    /// Mini-batch size; `None` means round(√N).
    pub batch: Option<usize>,
    /// Greedy column-selection candidates per pick; `None` scans every column
    /// for N ≤ 2048 and samples 59 otherwise.
    pub candidates: Option<usize>,
    pub seed: u64,
    pub tol: f64,
}

impl SolverBudget {
    pub fn new(n_eig: usize, seed: u64) -> Self {
        Self { n_eig, n_iter: 1000, l_col: None, batch: None, candidates: None, seed, tol: 1e-8 }
    }

    pub fn with_iter(mut self, n_iter: usize) -> Self {
        self.n_iter = n_iter;
        self
    }

    pub fn with_l_col(mut self, l_col: usize) -> Self {
        self.l_col = Some(l_col);
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = Some(batch);
        self
    }

    /// ℓ_col = ⌈log₂ N⌉, floored at max(n_eig, 16), capped at N.
    pub fn resolved_l_col(&self, n: usize) -> usize {
        self.l_col.unwrap_or_else(|| {
            let log = (n.max(2) as f64).log2().ceil() as usize;
            log.max(self.n_eig.max(16))
        })
        .min(n)
    }

    pub fn resolved_batch(&self, n: usize) -> usize {
        self.batch.unwrap_or_else(|| (n as f64).sqrt().round() as usize).clamp(1, n.max(1))
    }

    pub fn validate(&self, n: usize) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Parameter(m));
        if self.n_eig == 0 {
            return bad("n_eig must be at least 1".into());
        }
        if self.n_eig > n {
            return bad(format!("n_eig = {} exceeds matrix size {n}", self.n_eig));
        }
        if self.n_iter < self.n_eig {
            return bad(format!("n_iter = {} is below n_eig = {}", self.n_iter, self.n_eig));
        }
        if let Some(l) = self.l_col {
            if l < self.n_eig || l > n {
                return bad(format!("l_col = {l} must lie in [n_eig, N] = [{}, {n}]", self.n_eig));
            }
        }
        if self.batch == Some(0) {
            return bad("batch must be at least 1".into());
        }
        Ok(())
    }
}

/// A symmetric linear operator, possibly never materialized.
pub trait SymmetricOperator: Sync {
    fn dim(&self) -> usize;
    /// A X
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
    /// Σ_k A[:, cols[k]] · X[k, :], i.e. A restricted to `cols` times the
    /// matching rows of a block.
    fn apply_columns(&self, cols: &[usize], x: &DMatrix<f64>) -> DMatrix<f64>;
    /// Upper bound on the spectral norm.
    fn norm_bound(&self) -> f64;

    fn apply_vec(&self, x: &[f64], y: &mut [f64]) {
        let out = self.apply(&DMatrix::from_column_slice(x.len(), 1, x));
        y.copy_from_slice(out.as_slice());
    }
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
    fn apply_columns(&self, cols: &[usize], x: &DMatrix<f64>) -> DMatrix<f64> {
        self.select_columns(cols) * x
    }
    fn norm_bound(&self) -> f64 {
        self.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }
    fn apply_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}

impl SymmetricOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.mul_dense(x)
    }
    fn apply_columns(&self, cols: &[usize], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), x.ncols());
        for (k, &j) in cols.iter().enumerate() {
            for (i, v) in self.row(j) {
                for c in 0..x.ncols() {
                    out[(i, c)] += v * x[(k, c)];
                }
            }
        }
        out
    }
    fn norm_bound(&self) -> f64 {
        (0..self.nrows())
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
    fn apply_vec(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y)
    }
}

/// Largest principal angle (radians) between the column spaces of `a` and
/// `b`, computed from sin θ = ‖(E − QₐQₐᵀ) Q_b‖₂ for accuracy at small angles.
pub fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let resid = &qb - &qa * (qa.transpose() * &qb);
    let s2 = symmetric_eigen(&resid.tr_mul(&resid)).0.last().copied().unwrap_or(0.0);
    s2.max(0.0).sqrt().min(1.0).asin()
}

/// Thin QR with non-negative diagonal in R.
pub(crate) fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (c, mut col) in q.column_iter_mut().enumerate() {
        if r[(c, c)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Sort eigenpairs ascending by value (stable on ties) and keep the first `k`.
pub(crate) fn sorted_pairs(values: &[f64], vectors: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    (idx.iter().map(|&i| values[i]).collect(), vectors.select_columns(&idx))
}
