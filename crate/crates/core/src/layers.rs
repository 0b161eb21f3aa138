//! Network layers: spectral analysis (a bank of independent spectral
//! procedures over the pooled patches of all images), max-magnitude pooling,
//! binarization and binary-to-decimal coding.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affinity::{
    self, component_count, eps_graph, gaussian_kernel, knn_graph_from_lists, knn_lists, mst_longest_edge,
    self_tuning_kernel, AffinityError, AffinityGraph, AffinityKind, AffinityStorage, GaussianKernel,
};
use crate::eigen::{
    dense_eigh, lanczos_smallest, minibatch_stiefel, nystrom_laplacian_embedding, SolverBudget, SolverError, SolverKind,
    SpectralEmbedding,
};
use crate::laplacian::{laplacian, LaplacianError, LaplacianKind};
use crate::patch::{stack_embeddings, FeatureMaps, Lineage, PatchError, PatchGrid};
use crate::points::PointSet;
use crate::rng;

/// Above this size dense affinities stay implicit instead of materialized.
const MATERIALIZE_MAX: usize = 4000;
/// Default Lanczos Krylov dimension floor.
const LANCZOS_ITER_FLOOR: usize = 200;
/// Default mini-batch step count.
const MINIBATCH_STEPS: usize = 1000;

/// One spectral analysis procedure: affinity, Laplacian, solver, and the
/// number of eigenvectors kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcedureSpec {
    pub affinity: AffinityKind,
    pub laplacian: LaplacianKind,
    pub solver: SolverKind,
    pub n_eig: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_col: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
}

impl fmt::Display for ProcedureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.affinity, self.laplacian, self.solver, self.n_eig)
    }
}

impl ProcedureSpec {
    pub fn new(affinity: AffinityKind, laplacian: LaplacianKind, solver: SolverKind, n_eig: usize) -> Self {
        Self { affinity, laplacian, solver, n_eig, n_iter: None, tol: None, l_col: None, batch: None }
    }

    /// Sparse affinities pair with Lanczos or dense; dense affinities with
    /// Nyström, mini-batch or dense.
    pub fn validate(&self) -> Result<(), String> {
        if self.n_eig == 0 {
            return Err("n_eig must be at least 1".into());
        }
        if self.laplacian == LaplacianKind::Unnormalized {
            return Err("procedures use the sym or rw Laplacian".into());
        }
        let ok = match self.solver {
            SolverKind::Dense => true,
            SolverKind::Lanczos => self.affinity.is_sparse(),
            SolverKind::Nystrom | SolverKind::Minibatch => !self.affinity.is_sparse(),
        };
        if !ok {
            let class = if self.affinity.is_sparse() { "sparse" } else { "dense" };
            return Err(format!("solver {} cannot be used with the {class} affinity {}", self.solver, self.affinity));
        }
        match self.affinity {
            AffinityKind::Knn(0) | AffinityKind::SelfTune(0) => Err("neighbor count must be at least 1".into()),
            _ => Ok(()),
        }
    }

    fn budget(&self, n: usize, seed: u64) -> SolverBudget {
        let default_iter = match self.solver {
            SolverKind::Minibatch => MINIBATCH_STEPS,
            _ => (4 * self.n_eig).max(LANCZOS_ITER_FLOOR),
        };
        let mut b = SolverBudget::new(self.n_eig, seed);
        b.n_iter = self.n_iter.unwrap_or(default_iter);
        if self.solver == SolverKind::Lanczos {
            b.n_iter = b.n_iter.min(n);
        }
        if let Some(t) = self.tol {
            b.tol = t;
        }
        b.l_col = self.l_col;
        b.batch = self.batch;
        b
    }

    /// Identity of the eigenproblem: procedures differing only in the
    /// Laplacian normalization share one solve.
    fn solve_key(&self) -> String {
        format!(
            "{}/{}/{}/{:?}/{:?}/{:?}/{:?}",
            self.affinity, self.solver, self.n_eig, self.n_iter, self.tol, self.l_col, self.batch
        )
    }
}

#[derive(Debug, Error)]
pub enum ProcedureError {
    #[error("invalid procedure: {0}")]
    Invalid(String),
    #[error(transparent)]
    Affinity(#[from] AffinityError),
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("affinity graph has {components} connected components; enlarge the neighborhood so the graph is connected")]
    Disconnected { components: usize },
}

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("procedure {procedure} ({spec}): {source}")]
    Procedure {
        procedure: usize,
        spec: String,
        #[source]
        source: ProcedureError,
    },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("invalid layer input: {0}")]
    Input(String),
}

/// Per-procedure solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureReport {
    pub procedure: usize,
    pub spec: String,
    pub residual: Option<f64>,
    pub converged: bool,
    pub eigenvalue_min: f64,
    pub eigenvalue_max: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SpectralOutput {
    pub maps: Vec<FeatureMaps>,
    pub reports: Vec<ProcedureReport>,
}

/// Neighbor lists and MST scale shared by the procedures of one layer.
struct SharedGeometry {
    points: Arc<PointSet>,
    knn: Option<Vec<Vec<usize>>>,
    eta: Option<f64>,
}

impl SharedGeometry {
    fn new(points: Arc<PointSet>, procs: &[ProcedureSpec]) -> Result<Self, LayerError> {
        let wrap = |t: usize, source: ProcedureError| LayerError::Procedure {
            procedure: t,
            spec: procs[t].to_string(),
            source,
        };
        let mut k_max: Option<(usize, usize)> = None;
        for (t, p) in procs.iter().enumerate() {
            if let AffinityKind::Knn(k) | AffinityKind::SelfTune(k) = p.affinity {
                if k_max.is_none_or(|(_, m)| k > m) {
                    k_max = Some((t, k));
                }
            }
        }
        let knn = match k_max {
            Some((t, k)) => Some(knn_lists(&points, k).map_err(|e| wrap(t, e.into()))?),
            None => None,
        };
        let eta = match procs.iter().position(|p| matches!(p.affinity, AffinityKind::EpsMst(_))) {
            Some(t) => Some(mst_longest_edge(&points).map_err(|e| wrap(t, e.into()))?),
            None => None,
        };
        Ok(Self { points, knn, eta })
    }

    fn lists(&self) -> &[Vec<usize>] {
        self.knn.as_deref().expect("neighbor lists computed for neighbor-based affinities")
    }

    fn sparse_graph(&self, kind: AffinityKind) -> Result<AffinityGraph, ProcedureError> {
        let mut g = match kind {
            AffinityKind::Knn(k) => knn_graph_from_lists(self.lists(), k),
            AffinityKind::EpsMst(m) => eps_graph(&self.points, m * self.eta.expect("MST computed"))?,
            AffinityKind::Eps(e) => eps_graph(&self.points, e)?,
            _ => unreachable!("dense affinity"),
        };
        g.kind = kind;
        Ok(g)
    }

    fn kernel(&self, kind: AffinityKind) -> Result<GaussianKernel, ProcedureError> {
        Ok(match kind {
            AffinityKind::Full(s) => gaussian_kernel(self.points.clone(), s)?,
            AffinityKind::SelfTune(k) => self_tuning_kernel(self.points.clone(), self.lists(), k)?,
            _ => unreachable!("sparse affinity"),
        })
    }
}

/// Symmetric-normalized eigenproblem of one procedure: the L_sym embedding
/// and the degrees used for the random-walk transform.
fn solve_sym(
    geo: &SharedGeometry,
    spec: &ProcedureSpec,
    seed: u64,
    require_connected: bool,
) -> Result<(SpectralEmbedding, Vec<f64>), ProcedureError> {
    let n = geo.points.len();
    let budget = spec.budget(n, seed);
    if spec.affinity.is_sparse() {
        let g = geo.sparse_graph(spec.affinity)?;
        let components = if require_connected { component_count(&g) } else { 1 };
        if components > 1 {
            return Err(ProcedureError::Disconnected { components });
        }
        let l = laplacian(&g, LaplacianKind::Sym)?;
        let e = match spec.solver {
            SolverKind::Dense => dense_eigh(&l.to_dense(), spec.n_eig)?,
            _ => lanczos_smallest(&l, &budget)?,
        };
        return Ok((e, l.degrees));
    }
    let kernel = geo.kernel(spec.affinity)?;
    match spec.solver {
        SolverKind::Nystrom => Ok(nystrom_laplacian_embedding(&kernel, &budget)?),
        SolverKind::Dense => {
            let g = AffinityGraph { n, kind: spec.affinity, storage: AffinityStorage::Dense(kernel.to_dense()) };
            let l = laplacian(&g, LaplacianKind::Sym)?;
            let e = dense_eigh(&l.to_dense(), spec.n_eig)?;
            Ok((e, l.degrees))
        }
        _ => {
            let storage = if n <= MATERIALIZE_MAX {
                AffinityStorage::Dense(kernel.to_dense())
            } else {
                AffinityStorage::Kernel(kernel)
            };
            let g = AffinityGraph { n, kind: spec.affinity, storage };
            let l = laplacian(&g, LaplacianKind::Sym)?;
            let e = minibatch_stiefel(&l, &budget)?;
            Ok((e, l.degrees))
        }
    }
}

/// Random-walk eigenvectors from symmetric ones: v_rw = D^{-1/2} v_sym,
/// D-orthonormal with the same eigenvalues.
pub fn rw_from_sym(sym: &SpectralEmbedding, degrees: &[f64]) -> SpectralEmbedding {
    let mut e = sym.clone();
    for (i, mut row) in e.vectors.row_iter_mut().enumerate() {
        row.scale_mut(1.0 / degrees[i].sqrt());
    }
    e.canonicalize_signs();
    e
}

fn finish(spec: &ProcedureSpec, sym: &SpectralEmbedding, degrees: &[f64]) -> SpectralEmbedding {
    match spec.laplacian {
        LaplacianKind::Rw => rw_from_sym(sym, degrees),
        _ => sym.clone(),
    }
}

fn solve_all(
    points: Arc<PointSet>,
    procs: &[ProcedureSpec],
    seed: u64,
    require_connected: bool,
) -> Result<Vec<SpectralEmbedding>, LayerError> {
    if procs.is_empty() {
        return Err(LayerError::Input("a spectral layer needs at least one procedure".into()));
    }
    for (t, p) in procs.iter().enumerate() {
        p.validate().map_err(|m| LayerError::Procedure {
            procedure: t,
            spec: p.to_string(),
            source: ProcedureError::Invalid(m),
        })?;
    }
    let geo = SharedGeometry::new(points, procs)?;
    let mut keys: BTreeMap<String, usize> = BTreeMap::new();
    for (t, p) in procs.iter().enumerate() {
        keys.entry(p.solve_key()).or_insert(t);
    }
    let firsts: Vec<(String, usize)> = keys.into_iter().collect();
    let solved: Vec<(String, Result<(SpectralEmbedding, Vec<f64>), LayerError>)> = firsts
        .par_iter()
        .map(|(key, t)| {
            let s = rng::derive_seed(seed, &format!("procedure/{key}"));
            let r = solve_sym(&geo, &procs[*t], s, require_connected).map_err(|source| LayerError::Procedure {
                procedure: *t,
                spec: procs[*t].to_string(),
                source,
            });
            (key.clone(), r)
        })
        .collect();
    let mut cache = BTreeMap::new();
    for (key, r) in solved {
        cache.insert(key, r?);
    }
    Ok(procs
        .iter()
        .map(|p| {
            let (sym, deg) = &cache[&p.solve_key()];
            finish(p, sym, deg)
        })
        .collect())
}

/// Embedding of one procedure over a point set. Unlike a spectral layer,
/// disconnected sparse graphs are accepted: their components show up as a
/// repeated zero eigenvalue.
pub fn procedure_embedding(
    points: Arc<PointSet>,
    spec: &ProcedureSpec,
    seed: u64,
) -> Result<SpectralEmbedding, LayerError> {
    Ok(solve_all(points, std::slice::from_ref(spec), seed, false)?.remove(0))
}

/// Run every procedure on the patches of all images pooled into one point
/// set, stack each embedding back onto the patch grid, and concatenate the
/// procedures channel-wise in order.
pub fn spectral_layer(grids: &[PatchGrid], procs: &[ProcedureSpec], seed: u64) -> Result<SpectralOutput, LayerError> {
    let first = grids.first().ok_or_else(|| LayerError::Input("no images".into()))?;
    let shape = (first.rows, first.cols, first.patch_len());
    if let Some(i) = grids.iter().position(|g| (g.rows, g.cols, g.patch_len()) != shape) {
        return Err(LayerError::Input(format!("image {i} has a different patch grid than image 0")));
    }
    let mut data = Vec::with_capacity(grids.len() * first.len() * shape.2);
    for g in grids {
        data.extend_from_slice(g.as_slice());
    }
    let points = Arc::new(PointSet::new(grids.len() * first.len(), shape.2, data));
    let started = Instant::now();
    let embeddings = solve_all(points, procs, seed, true)?;
    log::debug!("spectral layer solved {} procedures in {:?}", procs.len(), started.elapsed());

    let mut per_image: Vec<Vec<FeatureMaps>> = vec![Vec::with_capacity(procs.len()); grids.len()];
    let mut reports = Vec::with_capacity(procs.len());
    for (t, e) in embeddings.iter().enumerate() {
        for (img, m) in stack_embeddings(e, t, shape.0, shape.1, grids.len())?.into_iter().enumerate() {
            per_image[img].push(m);
        }
        reports.push(ProcedureReport {
            procedure: t,
            spec: procs[t].to_string(),
            residual: e.residual,
            converged: e.converged,
            eigenvalue_min: e.eigenvalues[0],
            eigenvalue_max: *e.eigenvalues.last().expect("n_eig >= 1"),
            warnings: e.warnings.clone(),
        });
    }
    let maps = per_image
        .into_par_iter()
        .map(|parts| FeatureMaps::concat_channels(&parts))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SpectralOutput { maps, reports })
}

/// Max-magnitude pooling: each output keeps the signed value of largest
/// |·| in its s_p × s_p window (first in row-major order on ties). Windows
/// start at multiples of `stride` and read zeros past the border.
pub fn pool(maps: &FeatureMaps, size: usize, stride: usize) -> FeatureMaps {
    assert!(size >= 1 && stride >= 1, "pool size and stride must be positive");
    let out_r = maps.rows.div_ceil(stride);
    let out_c = maps.cols.div_ceil(stride);
    let ch = maps.channels;
    let mut values = vec![0.0; out_r * out_c * ch];
    for u in 0..out_r {
        for v in 0..out_c {
            let base = (u * out_c + v) * ch;
            for c in 0..ch {
                let mut best = 0.0f64;
                for r in u * stride..(u * stride + size).min(maps.rows) {
                    for q in v * stride..(v * stride + size).min(maps.cols) {
                        let x = maps.get(r, q, c);
                        if x.abs() > best.abs() {
                            best = x;
                        }
                    }
                }
                values[base + c] = best;
            }
        }
    }
    FeatureMaps { rows: out_r, cols: out_c, channels: ch, values, lineage: maps.lineage.clone() }
}

/// Sign maps: bit 1 where the value is strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMaps {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub bits: Vec<u8>,
    pub lineage: Vec<Lineage>,
}

impl BinaryMaps {
    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.bits[(row * self.cols + col) * self.channels + ch]
    }

    pub fn to_feature_maps(&self) -> FeatureMaps {
        FeatureMaps {
            rows: self.rows,
            cols: self.cols,
            channels: self.channels,
            values: self.bits.iter().map(|&b| b as f64).collect(),
            lineage: self.lineage.clone(),
        }
    }
}

pub fn binarize(maps: &FeatureMaps) -> BinaryMaps {
    BinaryMaps {
        rows: maps.rows,
        cols: maps.cols,
        channels: maps.channels,
        bits: maps.values.iter().map(|&v| u8::from(v > 0.0)).collect(),
        lineage: maps.lineage.clone(),
    }
}

/// Channel order used by the coding layer: eigenvalue non-descending, then
/// procedure, then eigen rank.
pub fn coding_order(lineage: &[Lineage]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lineage.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&lineage[a], &lineage[b]);
        x.eigenvalue
            .total_cmp(&y.eigenvalue)
            .then(x.procedure.cmp(&y.procedure))
            .then(x.rank.cmp(&y.rank))
    });
    order
}

/// Pack groups of `group` sorted binary maps into decimal maps: within a
/// group the j-th map (1-based) weighs 2^{L−j}. A short final group is
/// padded with zero bits at the low-weight end. Each coded channel inherits
/// the lineage of its group's first map.
pub fn code(maps: &BinaryMaps, group: usize) -> FeatureMaps {
    assert!(group >= 1 && group < 53, "group size must lie in [1, 52]");
    let order = coding_order(&maps.lineage);
    let groups: Vec<&[usize]> = order.chunks(group).collect();
    let positions = maps.rows * maps.cols;
    let mut values = Vec::with_capacity(positions * groups.len());
    for p in 0..positions {
        let bits = &maps.bits[p * maps.channels..(p + 1) * maps.channels];
        for g in &groups {
            let v = g
                .iter()
                .enumerate()
                .map(|(j, &c)| (bits[c] as u64) << (group - 1 - j))
                .sum::<u64>();
            values.push(v as f64);
        }
    }
    let lineage = groups.iter().map(|g| maps.lineage[g[0]].clone()).collect();
    FeatureMaps { rows: maps.rows, cols: maps.cols, channels: groups.len(), values, lineage }
}

/// The rows of a set of maps, one point per (image, position), as a
/// dense matrix.
pub fn map_points(maps: &[FeatureMaps]) -> DMatrix<f64> {
    crate::patch::flatten_maps(maps)
}

#[doc(hidden)]
pub use affinity::SELF_TUNE_K;
