//! Degree vectors and graph Laplacians: unnormalized L = D − W, symmetric
//! L_sym = E − D^{-1/2} W D^{-1/2}, and random-walk L_rw = E − D^{-1} W.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{AffinityGraph, AffinityStorage, GaussianKernel};
use crate::eigen::SymmetricOperator;
use crate::points::BLOCK;
use crate::sparse::CsrMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum LaplacianError {
    #[error("node {0} is isolated (zero degree)")]
    IsolatedNode(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplacianKind {
    Unnormalized,
    Sym,
    Rw,
}

impl fmt::Display for LaplacianKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unnormalized => "unnormalized",
            Self::Sym => "sym",
            Self::Rw => "rw",
        })
    }
}

impl FromStr for LaplacianKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unnormalized" => Ok(Self::Unnormalized),
            "sym" => Ok(Self::Sym),
            "rw" => Ok(Self::Rw),
            other => Err(format!("unknown Laplacian kind `{other}` (expected sym or rw)")),
        }
    }
}

/// d_i = Σ_j w_ij; every degree must be positive.
pub fn degree_vector(g: &AffinityGraph) -> Result<Vec<f64>, LaplacianError> {
    let d = g.row_sums();
    match d.iter().position(|&v| v <= 0.0) {
        Some(i) => Err(LaplacianError::IsolatedNode(i)),
        None => Ok(d),
    }
}

/// Laplacian of an implicit Gaussian affinity.
#[derive(Debug, Clone)]
pub struct ImplicitLaplacian {
    kernel: GaussianKernel,
    kind: LaplacianKind,
    degrees: Vec<f64>,
    inv_sqrt: Vec<f64>,
}

impl ImplicitLaplacian {
    #[inline]
    fn scale(&self, i: usize, j: usize) -> f64 {
        match self.kind {
            LaplacianKind::Unnormalized => 1.0,
            LaplacianKind::Sym => self.inv_sqrt[i] * self.inv_sqrt[j],
            LaplacianKind::Rw => 1.0 / self.degrees[i],
        }
    }

    #[inline]
    fn diag(&self, i: usize) -> f64 {
        match self.kind {
            LaplacianKind::Unnormalized => self.degrees[i],
            _ => 1.0,
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let off = -self.kernel.entry(i, j) * self.scale(i, j);
        if i == j {
            self.diag(i) + off
        } else {
            off
        }
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }
}

#[derive(Debug, Clone)]
pub enum LaplacianStorage {
    Sparse(CsrMatrix),
    Dense(DMatrix<f64>),
    Implicit(ImplicitLaplacian),
}

#[derive(Debug, Clone)]
pub struct LaplacianMatrix {
    pub n: usize,
    pub kind: LaplacianKind,
    pub storage: LaplacianStorage,
    pub degrees: Vec<f64>,
}

/// Build the Laplacian of `kind`, preserving the affinity's storage class.
pub fn laplacian(g: &AffinityGraph, kind: LaplacianKind) -> Result<LaplacianMatrix, LaplacianError> {
    let degrees = degree_vector(g)?;
    Ok(laplacian_with_degrees(g, kind, degrees))
}

pub(crate) fn laplacian_with_degrees(g: &AffinityGraph, kind: LaplacianKind, degrees: Vec<f64>) -> LaplacianMatrix {
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let scale = |i: usize, j: usize| match kind {
        LaplacianKind::Unnormalized => 1.0,
        LaplacianKind::Sym => inv_sqrt[i] * inv_sqrt[j],
        LaplacianKind::Rw => 1.0 / degrees[i],
    };
    let diag = |i: usize| match kind {
        LaplacianKind::Unnormalized => degrees[i],
        _ => 1.0,
    };
    let n = g.n;
    let storage = match &g.storage {
        AffinityStorage::Sparse(w) => {
            let mut t: Vec<(usize, usize, f64)> = w.triplets().map(|(i, j, v)| (i, j, -v * scale(i, j))).collect();
            t.extend((0..n).map(|i| (i, i, diag(i))));
            LaplacianStorage::Sparse(CsrMatrix::from_triplets(n, n, t))
        }
        AffinityStorage::Dense(w) => {
            LaplacianStorage::Dense(DMatrix::from_fn(n, n, |i, j| {
                let off = -w[(i, j)] * scale(i, j);
                if i == j { diag(i) + off } else { off }
            }))
        }
        AffinityStorage::Kernel(k) => LaplacianStorage::Implicit(ImplicitLaplacian {
            kernel: k.clone(),
            kind,
            degrees: degrees.clone(),
            inv_sqrt,
        }),
    };
    LaplacianMatrix { n, kind, storage, degrees }
}

impl LaplacianMatrix {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            LaplacianStorage::Sparse(m) => m.get(i, j),
            LaplacianStorage::Dense(m) => m[(i, j)],
            LaplacianStorage::Implicit(l) => l.entry(i, j),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            LaplacianStorage::Sparse(m) => m.to_dense(),
            LaplacianStorage::Dense(m) => m.clone(),
            LaplacianStorage::Implicit(l) => DMatrix::from_fn(self.n, self.n, |i, j| l.entry(i, j)),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, LaplacianStorage::Sparse(_))
    }

    pub fn is_symmetric_kind(&self) -> bool {
        self.kind != LaplacianKind::Rw
    }
}

impl SymmetricOperator for LaplacianMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            LaplacianStorage::Sparse(m) => m.mul_dense(x),
            LaplacianStorage::Dense(m) => m * x,
            LaplacianStorage::Implicit(l) => {
                let n = self.n;
                let mut out = DMatrix::zeros(n, x.ncols());
                for start in (0..n).step_by(BLOCK) {
                    let rows: Vec<usize> = (start..(start + BLOCK).min(n)).collect();
                    // symmetric W: rows of W = columns of W
                    let w = l.kernel.columns(&rows);
                    for (r, &i) in rows.iter().enumerate() {
                        for c in 0..x.ncols() {
                            let mut acc = l.diag(i) * x[(i, c)];
                            for j in 0..n {
                                acc -= w[(j, r)] * l.scale(i, j) * x[(j, c)];
                            }
                            out[(i, c)] = acc;
                        }
                    }
                }
                out
            }
        }
    }

    fn apply_columns(&self, cols: &[usize], x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            LaplacianStorage::Implicit(l) => {
                let w = l.kernel.columns(cols);
                let mut block = DMatrix::zeros(self.n, cols.len());
                for (k, &j) in cols.iter().enumerate() {
                    for i in 0..self.n {
                        block[(i, k)] = -w[(i, k)] * l.scale(i, j);
                    }
                    block[(j, k)] += l.diag(j);
                }
                block * x
            }
            LaplacianStorage::Sparse(m) => {
                let mut out = DMatrix::zeros(self.n, x.ncols());
                // L symmetric: column j of L equals row j
                for (k, &j) in cols.iter().enumerate() {
                    for (i, v) in m.row(j) {
                        for c in 0..x.ncols() {
                            out[(i, c)] += v * x[(k, c)];
                        }
                    }
                }
                out
            }
            LaplacianStorage::Dense(m) => {
                let sub = m.select_columns(cols);
                sub * x
            }
        }
    }

    fn norm_bound(&self) -> f64 {
        match self.kind {
            LaplacianKind::Sym | LaplacianKind::Rw => 2.0,
            LaplacianKind::Unnormalized => 2.0 * self.degrees.iter().cloned().fold(0.0, f64::max),
        }
    }
}
