//! Affinity graphs between points: k-nearest-neighbor, ε-neighborhood (with
//! ε derived from the longest minimum-spanning-tree edge), fully connected
//! Gaussian, and self-tuning Gaussian.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::points::{for_each_block, sq_dist, PointSet};
use crate::sparse::CsrMatrix;

/// Default neighbor rank for self-tuning bandwidths.
pub const SELF_TUNE_K: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum AffinityError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Affinity construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AffinityKind {
    /// Binary union-symmetrized k-nearest-neighbor graph.
    Knn(usize),
    /// Binary ε-neighborhood graph with ε given as a multiple of the longest
    /// MST edge η.
    EpsMst(f64),
    /// Binary ε-neighborhood graph with an absolute radius.
    Eps(f64),
    /// Dense Gaussian exp(−d²/(2σ²)).
    Full(f64),
    /// Dense Gaussian with per-point bandwidths σ_i = distance to the K-th neighbor.
    SelfTune(usize),
}

impl AffinityKind {
    pub fn is_sparse(&self) -> bool {
        matches!(self, Self::Knn(_) | Self::Eps(_) | Self::EpsMst(_))
    }
}

impl fmt::Display for AffinityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Knn(k) => write!(f, "knn:{k}"),
            Self::EpsMst(m) => write!(f, "eps:{m}eta"),
            Self::Eps(e) => write!(f, "eps:{e}"),
            Self::Full(s) => write!(f, "full:{s}"),
            Self::SelfTune(k) => write!(f, "selftune:{k}"),
        }
    }
}

impl FromStr for AffinityKind {
    type Err = String;

    /// `knn:9`, `eps:0.5eta`, `eps:0.3`, `full:0.1`, `selftune` or `selftune:7`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, param) = match s.split_once(':') {
            Some((k, p)) => (k.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let num = |p: Option<&str>| -> Result<f64, String> {
            let p = p.ok_or_else(|| format!("affinity `{kind}` needs a parameter"))?;
            p.parse::<f64>().map_err(|e| format!("bad affinity parameter `{p}`: {e}"))
        };
        let count = |p: Option<&str>| -> Result<usize, String> {
            let p = p.ok_or_else(|| format!("affinity `{kind}` needs a parameter"))?;
            p.parse::<usize>().map_err(|e| format!("bad affinity parameter `{p}`: {e}"))
        };
        let positive = |v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(format!("affinity parameter must be positive, got {v}"))
            }
        };
        match kind {
            "knn" => Ok(Self::Knn(count(param)?)),
            "eps" => match param.and_then(|p| p.strip_suffix("eta")) {
                Some(m) => Ok(Self::EpsMst(positive(num(Some(m))?)?)),
                None => Ok(Self::Eps(positive(num(param)?)?)),
            },
            "full" => Ok(Self::Full(positive(num(param)?)?)),
            "selftune" => Ok(Self::SelfTune(param.map_or(Ok(SELF_TUNE_K), |p| count(Some(p)))?)),
            other => Err(format!("unknown affinity kind `{other}`")),
        }
    }
}

impl TryFrom<String> for AffinityKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AffinityKind> for String {
    fn from(k: AffinityKind) -> String {
        k.to_string()
    }
}

/// Per-pair Gaussian bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidth {
    /// exp(−d²/(2σ²))
    Fixed(f64),
    /// exp(−d²/(σ_i σ_j))
    PerPoint(Vec<f64>),
}

/// A Gaussian affinity evaluated on demand. Diagonal entries are zero.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    points: Arc<PointSet>,
    norms: Vec<f64>,
    bandwidth: Bandwidth,
}

impl GaussianKernel {
    pub fn new(points: Arc<PointSet>, bandwidth: Bandwidth) -> Self {
        let norms = points.sq_norms();
        Self { points, norms, bandwidth }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bandwidth(&self) -> &Bandwidth {
        &self.bandwidth
    }

    #[inline]
    fn weight(&self, i: usize, j: usize, d2: f64) -> f64 {
        if i == j {
            return 0.0;
        }
        match &self.bandwidth {
            Bandwidth::Fixed(s) => (-d2 / (2.0 * s * s)).exp(),
            Bandwidth::PerPoint(s) => (-d2 / (s[i] * s[j])).exp(),
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.weight(i, j, self.points.sq_dist(i, j))
    }

    /// Columns `cols` of W as an N × |cols| matrix.
    pub fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let n = self.len();
        let all = self.points.columns_view();
        let mut sel = DMatrix::zeros(self.points.dim(), cols.len());
        for (k, &j) in cols.iter().enumerate() {
            sel.column_mut(k).copy_from_slice(self.points.row(j));
        }
        let mut out = all.transpose() * &sel;
        for (k, &j) in cols.iter().enumerate() {
            let mut col = out.column_mut(k);
            for i in 0..n {
                let d2 = (self.norms[i] + self.norms[j] - 2.0 * col[i]).max(0.0);
                col[i] = self.weight(i, j, d2);
            }
        }
        out
    }

    /// Row sums of W by a blocked all-pairs pass.
    pub fn degrees(&self) -> Vec<f64> {
        for_each_block(&self.points, |start, d| {
            (0..d.nrows())
                .map(|r| {
                    let i = start + r;
                    (0..d.ncols()).map(|j| self.weight(i, j, d[(r, j)])).sum::<f64>()
                })
                .collect::<Vec<f64>>()
        })
        .concat()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j))
    }
}

#[derive(Debug, Clone)]
pub enum AffinityStorage {
    Sparse(CsrMatrix),
    Dense(DMatrix<f64>),
    /// Dense Gaussian affinity that is never materialized.
    Kernel(GaussianKernel),
}

/// Symmetric nonnegative affinity matrix with zero diagonal.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub n: usize,
    pub kind: AffinityKind,
    pub storage: AffinityStorage,
}

impl AffinityGraph {
    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, AffinityStorage::Sparse(_))
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            AffinityStorage::Sparse(m) => m.get(i, j),
            AffinityStorage::Dense(m) => m[(i, j)],
            AffinityStorage::Kernel(k) => k.entry(i, j),
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        match &self.storage {
            AffinityStorage::Sparse(m) => m.row_sums(),
            AffinityStorage::Dense(m) => m.row_iter().map(|r| r.sum()).collect(),
            AffinityStorage::Kernel(k) => k.degrees(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            AffinityStorage::Sparse(m) => m.to_dense(),
            AffinityStorage::Dense(m) => m.clone(),
            AffinityStorage::Kernel(k) => k.to_dense(),
        }
    }

    pub fn nnz(&self) -> usize {
        match &self.storage {
            AffinityStorage::Sparse(m) => m.nnz(),
            _ => self.n * self.n,
        }
    }
}

fn check_rank(k: usize, n: usize, what: &str) -> Result<(), AffinityError> {
    if k == 0 || k >= n {
        return Err(AffinityError::Parameter(format!("{what} = {k} must satisfy 1 <= {what} < N = {n}")));
    }
    Ok(())
}

/// Sorted k-nearest-neighbor lists (self excluded), ordered by distance with
/// ties broken by lower index.
pub fn knn_lists(points: &PointSet, k: usize) -> Result<Vec<Vec<usize>>, AffinityError> {
    let n = points.len();
    check_rank(k, n, "k")?;
    let norms = points.sq_norms();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let blocks = for_each_block(points, |start, d| {
        let mut out = Vec::with_capacity(d.nrows());
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for r in 0..d.nrows() {
            let i = start + r;
            cand.clear();
            cand.extend((0..n).filter(|&j| j != i).map(|j| (d[(r, j)], j)));
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0));
            // Gram distances carry rounding error; widen the cut, then rank exactly.
            let tol = 1e-9 * (norms[i] + max_norm) + 1e-300;
            let cut = cand[k - 1].0 + tol;
            let mut exact: Vec<(f64, usize)> = cand
                .iter()
                .filter(|c| c.0 <= cut)
                .map(|&(_, j)| (sq_dist(points.row(i), points.row(j)), j))
                .collect();
            exact.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.push(exact.iter().take(k).map(|c| c.1).collect::<Vec<_>>());
        }
        out
    });
    Ok(blocks.concat())
}

/// Union-symmetrized binary kNN graph from precomputed neighbor lists
/// (only the first `k` entries of each list are used).
pub fn knn_graph_from_lists(lists: &[Vec<usize>], k: usize) -> AffinityGraph {
    let n = lists.len();
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(2 * n * k);
    for (i, l) in lists.iter().enumerate() {
        for &j in l.iter().take(k) {
            pairs.push((i, j));
            pairs.push((j, i));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let triplets = pairs.into_iter().map(|(i, j)| (i, j, 1.0)).collect();
    AffinityGraph {
        n,
        kind: AffinityKind::Knn(k),
        storage: AffinityStorage::Sparse(CsrMatrix::from_triplets(n, n, triplets)),
    }
}

/// Binary kNN graph: edge (i, j) iff j ∈ kNN(i) or i ∈ kNN(j).
pub fn knn_graph(points: &PointSet, k: usize) -> Result<AffinityGraph, AffinityError> {
    Ok(knn_graph_from_lists(&knn_lists(points, k)?, k))
}

/// Longest edge of a Euclidean minimum spanning tree over the complete graph
/// (dense Prim, O(N²) distance evaluations).
pub fn mst_longest_edge(points: &PointSet) -> Result<f64, AffinityError> {
    Ok(mst_edges(points)?.iter().map(|e| e.2).fold(0.0, f64::max))
}

/// MST edges (parent, child, length).
pub fn mst_edges(points: &PointSet) -> Result<Vec<(usize, usize, f64)>, AffinityError> {
    let n = points.len();
    if n < 2 {
        return Err(AffinityError::Parameter(format!("MST needs at least 2 points, got {n}")));
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let row = points.row(cur);
        let mut next = usize::MAX;
        let mut next_d = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = sq_dist(row, points.row(j));
            if d < best[j] {
                best[j] = d;
                parent[j] = cur;
            }
            if best[j] < next_d {
                next_d = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((parent[next], next, next_d.sqrt()));
        cur = next;
    }
    Ok(edges)
}

/// Binary graph joining every pair at distance ≤ eps.
pub fn eps_graph(points: &PointSet, eps: f64) -> Result<AffinityGraph, AffinityError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(AffinityError::Parameter(format!("eps must be positive, got {eps}")));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let norms = points.sq_norms();
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    let blocks = for_each_block(points, |start, d| {
        let mut t = Vec::new();
        for r in 0..d.nrows() {
            let i = start + r;
            let tol = 1e-9 * (norms[i] + max_norm) + 1e-300;
            for j in 0..n {
                if j != i && d[(r, j)] <= eps2 + tol && points.sq_dist(i, j).sqrt() <= eps {
                    t.push((i, j, 1.0));
                }
            }
        }
        t
    });
    Ok(AffinityGraph {
        n,
        kind: AffinityKind::Eps(eps),
        storage: AffinityStorage::Sparse(CsrMatrix::from_triplets(n, n, blocks.concat())),
    })
}

fn check_sigma(sigma: f64) -> Result<(), AffinityError> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(AffinityError::Parameter(format!("sigma must be positive, got {sigma}")))
    }
}

/// Implicit fully connected Gaussian affinity.
pub fn gaussian_kernel(points: Arc<PointSet>, sigma: f64) -> Result<GaussianKernel, AffinityError> {
    check_sigma(sigma)?;
    Ok(GaussianKernel::new(points, Bandwidth::Fixed(sigma)))
}

/// Dense fully connected Gaussian affinity w_ij = exp(−‖x_i − x_j‖²/(2σ²)).
pub fn full_gaussian_graph(points: &PointSet, sigma: f64) -> Result<AffinityGraph, AffinityError> {
    let k = gaussian_kernel(Arc::new(points.clone()), sigma)?;
    Ok(AffinityGraph { n: points.len(), kind: AffinityKind::Full(sigma), storage: AffinityStorage::Dense(k.to_dense()) })
}

/// Self-tuning bandwidths: distance to the K-th neighbor, floored at
/// `floor`.
pub fn self_tuning_bandwidths(lists: &[Vec<usize>], points: &PointSet, k: usize, floor: f64) -> Vec<f64> {
    lists
        .iter()
        .enumerate()
        .map(|(i, l)| points.dist(i, l[k - 1]).max(floor))
        .collect()
}

/// Largest pairwise distance (blocked all-pairs pass).
pub fn max_pairwise_distance(points: &PointSet) -> f64 {
    for_each_block(points, |start, d| {
        let mut m = 0.0f64;
        for r in 0..d.nrows() {
            for j in 0..d.ncols() {
                if d[(r, j)] > m {
                    m = points.sq_dist(start + r, j).max(m);
                }
            }
        }
        m
    })
    .into_iter()
    .fold(0.0, f64::max)
    .sqrt()
}

/// Implicit self-tuning affinity. `lists` must hold at least `k` neighbors
/// per point. The σ floor uses twice the largest distance to the centroid,
/// an upper bound on the largest pairwise distance, to avoid a quadratic pass.
pub fn self_tuning_kernel(points: Arc<PointSet>, lists: &[Vec<usize>], k: usize) -> Result<GaussianKernel, AffinityError> {
    check_rank(k, points.len(), "K")?;
    let d = points.dim();
    let mut centroid = vec![0.0; d];
    for r in points.rows() {
        centroid.iter_mut().zip(r).for_each(|(c, v)| *c += v);
    }
    centroid.iter_mut().for_each(|c| *c /= points.len() as f64);
    let radius = points.rows().map(|r| sq_dist(r, &centroid)).fold(0.0, f64::max).sqrt();
    let sigmas = self_tuning_bandwidths(lists, &points, k, 1e-12 * 2.0 * radius);
    Ok(GaussianKernel::new(points, Bandwidth::PerPoint(sigmas)))
}

/// Dense self-tuning affinity w_ij = exp(−‖x_i − x_j‖²/(σ_i σ_j)).
pub fn self_tuning_graph(points: &PointSet, k: usize) -> Result<AffinityGraph, AffinityError> {
    let lists = knn_lists(points, k)?;
    let floor = 1e-12 * max_pairwise_distance(points);
    let sigmas = self_tuning_bandwidths(&lists, points, k, floor);
    let kernel = GaussianKernel::new(Arc::new(points.clone()), Bandwidth::PerPoint(sigmas));
    Ok(AffinityGraph {
        n: points.len(),
        kind: AffinityKind::SelfTune(k),
        storage: AffinityStorage::Dense(kernel.to_dense()),
    })
}

/// Connected components, treating every positive weight as an edge.
/// Returns the component id of each node (ids in order of first node).
pub fn components(g: &AffinityGraph) -> Vec<usize> {
    let n = g.n;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut union = |a: usize, b: usize| {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    match &g.storage {
        AffinityStorage::Sparse(m) => m.triplets().filter(|t| t.2 > 0.0).for_each(|(i, j, _)| union(i, j)),
        AffinityStorage::Dense(m) => {
            for i in 0..n {
                for j in i + 1..n {
                    if m[(i, j)] > 0.0 {
                        union(i, j);
                    }
                }
            }
        }
        AffinityStorage::Kernel(k) => {
            for i in 0..n {
                for j in i + 1..n {
                    if k.entry(i, j) > 0.0 {
                        union(i, j);
                    }
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            if ids[r] == usize::MAX {
                ids[r] = next;
                next += 1;
            }
            ids[r]
        })
        .collect()
}

pub fn component_count(g: &AffinityGraph) -> usize {
    components(g).into_iter().max().map_or(0, |m| m + 1)
}
