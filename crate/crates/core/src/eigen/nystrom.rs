use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use super::symeig::SymEig;
use super::{SolverBudget, SolverError, SolverKind, SpectralEmbedding};
use crate::affinity::GaussianKernel;
use crate::rng::{self, Stream};

/// Matrices up to this size are scanned in full during column selection.
const FULL_SCAN_MAX: usize = 2048;
/// Candidates per pick on larger matrices: the best of 59 random draws lies
/// in the top 5% of all columns with probability 0.95.
const SAMPLED_CANDIDATES: usize = 59;
/// Relative residual below which the picked columns already span the input.
const SPAN_TOL: f64 = 1e-9;

/// Column access to a symmetric PSD matrix.
pub trait ColumnSource: Sync {
    fn dim(&self) -> usize;
    /// N × |cols| block of columns.
    fn columns(&self, cols: &[usize]) -> DMatrix<f64>;
    fn diagonal(&self) -> Vec<f64>;
}

impl ColumnSource for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        self.select_columns(cols)
    }
    fn diagonal(&self) -> Vec<f64> {
        self.diagonal().iter().copied().collect()
    }
}

/// W + E for a zero-diagonal Gaussian kernel W. With a fixed bandwidth this
/// is positive semidefinite; W itself never is.
pub struct SelfLoopKernel<'a>(pub &'a GaussianKernel);

impl ColumnSource for SelfLoopKernel<'_> {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let mut c = self.0.columns(cols);
        for (k, &j) in cols.iter().enumerate() {
            c[(j, k)] += 1.0;
        }
        c
    }
    fn diagonal(&self) -> Vec<f64> {
        vec![1.0; self.0.len()]
    }
}

/// Low-rank factor with M ≈ G S Gᵀ, S = diag(signs). The signs are all +1
/// for a PSD input; kernels with per-point bandwidths can be indefinite.
#[derive(Debug, Clone)]
pub struct NystromFactor {
    pub selected: Vec<usize>,
    pub g: DMatrix<f64>,
    pub signs: Vec<f64>,
    pub ridge: f64,
    pub warnings: Vec<String>,
}

impl NystromFactor {
    fn signed_g(&self) -> DMatrix<f64> {
        let mut gs = self.g.clone();
        for (c, mut col) in gs.column_iter_mut().enumerate() {
            col.scale_mut(self.signs[c]);
        }
        gs
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.signed_g() * self.g.transpose()
    }

    /// M̂ x for a single vector.
    fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        self.signed_g() * self.g.tr_mul(x)
    }
}

/// Greedy column selection: each pick maximizes the norm of the column's
/// residual against the span of the columns already picked. Returns the picked
/// indices and the corresponding columns.
fn select_columns(
    src: &(impl ColumnSource + ?Sized),
    l_col: usize,
    min_picks: usize,
    candidates: Option<usize>,
    rng: &mut Stream,
) -> (Vec<usize>, DMatrix<f64>) {
    let n = src.dim();
    let full_scan = match candidates {
        Some(c) => c >= n,
        None => n <= FULL_SCAN_MAX,
    };
    let mut selected: Vec<usize> = Vec::with_capacity(l_col);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(l_col);
    let mut scale = 0.0f64;

    if full_scan {
        let all: Vec<usize> = (0..n).collect();
        let cols = src.columns(&all);
        let mut res2: Vec<f64> = cols.column_iter().map(|c| c.norm_squared()).collect();
        scale = res2.iter().cloned().fold(0.0, f64::max).sqrt();
        let mut taken = vec![false; n];
        while selected.len() < l_col {
            let best = (0..n)
                .filter(|&j| !taken[j])
                .fold(None, |acc: Option<usize>, j| match acc {
                    Some(b) if res2[b] >= res2[j] => Some(b),
                    _ => Some(j),
                })
                .expect("l_col ≤ N");
            if res2[best].max(0.0).sqrt() <= SPAN_TOL * scale && selected.len() >= min_picks {
                break;
            }
            taken[best] = true;
            selected.push(best);
            if let Some(q) = residual_direction(&basis, cols.column(best).into_owned(), scale) {
                let proj = cols.tr_mul(&q);
                for (r, p) in res2.iter_mut().zip(proj.iter()) {
                    *r = (*r - p * p).max(0.0);
                }
                basis.push(q);
            }
        }
        let picked = cols.select_columns(&selected);
        return (selected, picked);
    }

    let per_pick = candidates.unwrap_or(SAMPLED_CANDIDATES).max(1);
    let mut pool: Vec<usize> = (0..n).collect();
    let mut picked_cols: Vec<DVector<f64>> = Vec::with_capacity(l_col);
    while selected.len() < l_col && !pool.is_empty() {
        let draw = per_pick.min(pool.len());
        let mut positions = index::sample(rng, pool.len(), draw).into_vec();
        positions.sort_unstable();
        let cand: Vec<usize> = positions.iter().map(|&p| pool[p]).collect();
        let cols = src.columns(&cand);
        if scale == 0.0 {
            scale = cols.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        }
        let mut best = (0usize, -1.0f64);
        for k in 0..cand.len() {
            let r = project_out(&basis, cols.column(k).into_owned()).norm();
            if r > best.1 || (r == best.1 && cand[k] < cand[best.0]) {
                best = (k, r);
            }
        }
        if best.1 <= SPAN_TOL * scale && selected.len() >= min_picks {
            break;
        }
        let col = cols.column(best.0).into_owned();
        if let Some(q) = residual_direction(&basis, col.clone(), scale) {
            basis.push(q);
        }
        selected.push(cand[best.0]);
        picked_cols.push(col);
        pool.swap_remove(positions[best.0]);
    }
    let picked = DMatrix::from_columns(&picked_cols);
    (selected, picked)
}

fn project_out(basis: &[DVector<f64>], mut v: DVector<f64>) -> DVector<f64> {
    for _ in 0..2 {
        for q in basis {
            let h = q.dot(&v);
            v.axpy(-h, q, 1.0);
        }
    }
    v
}

fn residual_direction(basis: &[DVector<f64>], v: DVector<f64>, scale: f64) -> Option<DVector<f64>> {
    let r = project_out(basis, v);
    let nr = r.norm();
    (nr > SPAN_TOL * scale.max(f64::MIN_POSITIVE)).then(|| r / nr)
}

/// Rank-ℓ Nyström factor M ≈ C U⁺ Cᵀ from greedily selected columns,
/// with U the sampled block.
pub fn nystrom_factor(
    src: &(impl ColumnSource + ?Sized),
    budget: &SolverBudget,
) -> Result<NystromFactor, SolverError> {
    let n = src.dim();
    budget.validate(n)?;
    let l_col = budget.resolved_l_col(n);
    let mut rng = rng::stream(budget.seed, "nystrom/columns");
    let (selected, c) = select_columns(src, l_col, budget.n_eig, budget.candidates, &mut rng);
    let l = selected.len();
    let block = DMatrix::from_fn(l, l, |a, b| 0.5 * (c[(selected[a], b)] + c[(selected[b], a)]));
    let eig = SymEig::new(block);
    let amax = eig.eigenvalues.amax();
    let amin = eig.eigenvalues.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let mut warnings = Vec::new();
    let mut ridge = 0.0;
    if amax == 0.0 || amin <= 1e-10 * amax {
        ridge = 1e-10 * src.diagonal().iter().sum::<f64>() / n as f64;
        warnings.push(format!(
            "sampled {l}×{l} block is numerically singular (min |λ| = {amin:e}, max |λ| = {amax:e}); ridge {ridge:e} added"
        ));
    }
    let shifted: Vec<f64> = eig.eigenvalues.iter().map(|v| v + ridge).collect();
    let keep: Vec<usize> = (0..l).filter(|&i| shifted[i].abs() > 1e-13 * amax).collect();
    let mut scaled = eig.eigenvectors.select_columns(&keep);
    for (k, &i) in keep.iter().enumerate() {
        scaled.column_mut(k).scale_mut(1.0 / shifted[i].abs().sqrt());
    }
    let signs = keep.iter().map(|&i| shifted[i].signum()).collect();
    let g = c * scaled;
    Ok(NystromFactor { selected, g, signs, ridge, warnings })
}

/// Eigenpairs of the symmetric matrix Q T Qᵀ (Q orthonormal, T small),
/// largest first, dropping numerically zero eigenvalues.
fn projected_eigen(q: &DMatrix<f64>, t: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let t = (&t + t.transpose()) * 0.5;
    let eig = SymEig::new(t);
    let top = eig.eigenvalues.amax();
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i].abs() > 1e-12 * top).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    (values, q * eig.eigenvectors.select_columns(&idx))
}

/// Extends `u` to `k` orthonormal columns with seeded random directions.
fn complete_basis(u: DMatrix<f64>, k: usize, rng: &mut Stream) -> DMatrix<f64> {
    let n = u.nrows();
    let mut cols: Vec<DVector<f64>> = u.column_iter().map(|c| c.into_owned()).collect();
    while cols.len() < k {
        let v = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        if let Some(q) = residual_direction(&cols, v, 1.0) {
            cols.push(q);
        }
    }
    DMatrix::from_columns(&cols)
}

/// The `n_eig` largest eigenpairs of the Nyström approximation of a PSD
/// matrix, reported in non-descending eigenvalue order. Exact when the input
/// rank is at most ℓ_col.
pub fn nystrom_embed(
    src: &(impl ColumnSource + ?Sized),
    budget: &SolverBudget,
) -> Result<SpectralEmbedding, SolverError> {
    let n = src.dim();
    let factor = nystrom_factor(src, budget)?;
    let k = budget.n_eig;
    let q = super::orthonormalize(factor.g.clone());
    let r = q.tr_mul(&factor.g);
    let mut rs = r.clone();
    for (c, mut col) in rs.column_iter_mut().enumerate() {
        col.scale_mut(factor.signs[c]);
    }
    let (mut values, mut u) = projected_eigen(&q, rs * r.transpose());
    values.truncate(k);
    u = u.columns(0, values.len()).into_owned();
    if values.len() < k {
        let mut rng = rng::stream(budget.seed, "nystrom/complete");
        u = complete_basis(u, k, &mut rng);
        values.resize(k, 0.0);
    }
    // non-descending order
    values.reverse();
    let rev: Vec<usize> = (0..k).rev().collect();
    let u = u.select_columns(&rev);
    let mut e = SpectralEmbedding::new(u, values, SolverKind::Nystrom);
    e.canonicalize_signs();
    e.warnings = factor.warnings;
    if n <= FULL_SCAN_MAX {
        let all: Vec<usize> = (0..n).collect();
        let mu = src.columns(&all) * &e.vectors;
        let r = (0..k)
            .map(|c| (mu.column(c) - e.vectors.column(c) * e.eigenvalues[c]).norm())
            .fold(0.0, f64::max);
        e.residual = Some(r);
    }
    Ok(e)
}

/// Bottom `n_eig` eigenpairs of L_sym = E − D^{-1/2} W D^{-1/2} for a
/// zero-diagonal Gaussian kernel W.
///
/// K = W + E is approximated as G S Gᵀ, which gives
/// Ŵ = G S Gᵀ − E and degrees d̂ = Ŵ 1. The normalized affinity
/// D̂^{-1/2} Ŵ D̂^{-1/2} = H S Hᵀ − D̂^{-1} (H = D̂^{-1/2} G) is then solved by
/// Rayleigh–Ritz on the column space of H, which is exact when ℓ_col = N.
/// Returns the L_sym embedding and the estimated degrees.
pub fn nystrom_laplacian_embedding(
    kernel: &GaussianKernel,
    budget: &SolverBudget,
) -> Result<(SpectralEmbedding, Vec<f64>), SolverError> {
    let src = SelfLoopKernel(kernel);
    let factor = nystrom_factor(&src, budget)?;
    let g = &factor.g;
    let ones = DVector::from_element(g.nrows(), 1.0);
    let raw: Vec<f64> = factor.apply_vec(&ones).iter().map(|&d| d - 1.0).collect();
    let top = raw.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return Err(SolverError::Domain("approximate affinity has no positive degree".into()));
    }
    let floor = 1e-8 * top;
    let degrees: Vec<f64> = raw.iter().map(|&d| d.max(floor)).collect();
    let floored = raw.iter().filter(|&&d| d < floor).count();
    let mut warnings = factor.warnings.clone();
    if floored > 0 {
        warnings.push(format!(
            "{floored} of {} approximate degrees were not positive and were floored; increase l_col",
            raw.len()
        ));
    }
    let mut h = g.clone();
    for (i, mut row) in h.row_iter_mut().enumerate() {
        row.scale_mut(1.0 / degrees[i].sqrt());
    }
    let q = super::orthonormalize(h.clone());
    let b = q.tr_mul(&h);
    let mut bs = b.clone();
    for (c, mut col) in bs.column_iter_mut().enumerate() {
        col.scale_mut(factor.signs[c]);
    }
    let mut scaled_q = q.clone();
    for (i, mut row) in scaled_q.row_iter_mut().enumerate() {
        row.scale_mut(1.0 / degrees[i]);
    }
    let small = bs * b.transpose() - q.tr_mul(&scaled_q);
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymEig::new(small);
    let lap: Vec<f64> = eig.eigenvalues.iter().map(|m| 1.0 - m).collect();
    let k = budget.n_eig.min(lap.len());
    let (mut values, s) = super::sorted_pairs(&lap, &eig.eigenvectors, k);
    let mut u = q * s;
    if values.len() < budget.n_eig {
        let mut rng = rng::stream(budget.seed, "nystrom/complete");
        u = complete_basis(u, budget.n_eig, &mut rng);
        values.resize(budget.n_eig, 1.0);
    }
    let mut e = SpectralEmbedding::new(u, values, SolverKind::Nystrom);
    e.canonicalize_signs();
    if let Some(&v) = e.eigenvalues.iter().find(|&&v| !(-1e-6..=2.0 + 1e-6).contains(&v)) {
        warnings.push(format!("Ritz value {v} lies outside [0, 2]: the column sample is too small for this kernel"));
    }
    e.warnings = warnings;
    Ok((e, degrees))
}
