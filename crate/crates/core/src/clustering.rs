//! k-means with k-means++ seeding and restarts, and one-shot spectral
//! clustering (affinity → Laplacian → bottom-k eigenvectors → k-means).

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{procedure_embedding, LayerError, ProcedureSpec};
use crate::points::{sq_dist, PointSet};
use crate::rng::{self, Stream};

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITER: usize = 300;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid clustering parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    /// k × d, row-major by cluster.
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    pub restarts_used: usize,
}

struct Run {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
    inertia: f64,
    history: Vec<f64>,
}

fn plus_plus(points: &PointSet, k: usize, rng: &mut Stream) -> Vec<usize> {
    let n = points.len();
    let mut picks = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| points.sq_dist(i, picks[0])).collect();
    while picks.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // rounding can run past the last positive weight
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            chosen
        } else {
            // every point coincides with a center; take any unpicked index
            let free: Vec<usize> = (0..n).filter(|i| !picks.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        picks.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(points.sq_dist(i, next));
        }
    }
    picks
}

fn nearest(row: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(row, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &PointSet, k: usize, rng: &mut Stream) -> Run {
    let n = points.len();
    let d = points.dim();
    let mut centers: Vec<Vec<f64>> = plus_plus(points, k, rng).iter().map(|&i| points.row(i).to_vec()).collect();
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITER {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dd) = nearest(points.row(i), &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = dd;
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            sums[labels[i]].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
        }
        // repair empty clusters with the points farthest from their centers
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[labels[i]] > 1)
                .fold(None, |acc: Option<usize>, i| match acc {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken[i] = true;
                let old = labels[i];
                counts[old] -= 1;
                sums[old].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s -= v);
                labels[i] = c;
                counts[c] = 1;
                sums[c] = points.row(i).to_vec();
                dists[i] = 0.0;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points.row(i), &centers[labels[i]])).sum();
    Run { labels, centers, inertia, history }
}

/// Best of `restarts` Lloyd runs by inertia (ties go to the lower restart).
pub fn kmeans(points: &PointSet, k: usize, restarts: usize, seed: u64) -> Result<ClusteringResult, ClusterError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(ClusterError::Parameter(format!("k = {k} must lie in [1, N = {n}]")));
    }
    if restarts == 0 {
        return Err(ClusterError::Parameter("restarts must be at least 1".into()));
    }
    let runs: Vec<Run> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(points, k, &mut rng::stream(seed, &format!("kmeans/restart/{r}"))))
        .collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("restarts >= 1");
    Ok(ClusteringResult { labels: best.labels, centers: best.centers, inertia: best.inertia, restarts_used: restarts })
}

/// Inertia after each assignment step of a single seeded run.
pub fn lloyd_inertia_history(points: &PointSet, k: usize, seed: u64) -> Vec<f64> {
    lloyd(points, k, &mut rng::stream(seed, "kmeans/restart/0")).history
}

/// Seed of the spectral stage in a single-procedure clustering, shared with
/// the first layer of a pipeline run so the two agree.
pub fn layer_seed(seed: u64, layer: usize) -> u64 {
    rng::derive_seed(seed, &format!("layer/{layer}"))
}

pub fn kmeans_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "kmeans")
}

/// One-shot spectral clustering: the procedure's bottom-k eigenvectors
/// (n_eig is set to k) embed the points, and k-means clusters the rows.
pub fn spectral_cluster(
    points: &PointSet,
    k: usize,
    proc: &ProcedureSpec,
    restarts: usize,
    seed: u64,
) -> Result<(ClusteringResult, DMatrix<f64>), ClusterError> {
    if k == 0 || k > points.len() {
        return Err(ClusterError::Parameter(format!("k = {k} must lie in [1, N = {}]", points.len())));
    }
    let spec = ProcedureSpec { n_eig: k, ..proc.clone() };
    let e = procedure_embedding(Arc::new(points.clone()), &spec, layer_seed(seed, 0))?;
    let rows = PointSet::from_matrix(&e.vectors);
    Ok((kmeans(&rows, k, restarts, kmeans_seed(seed))?, e.vectors))
}
