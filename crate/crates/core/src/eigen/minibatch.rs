use nalgebra::{DMatrix};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use super::symeig::SymEig;
use super::{orthonormalize, sorted_pairs, SolverBudget, SolverError, SolverKind, SpectralEmbedding, SymmetricOperator};
use crate::rng;

/// Steps between full-gradient refreshes and trace checks.
const WINDOW: usize = 50;

/// (step, tr(YᵀLY)) samples taken every window.
pub type TraceHistory = Vec<(usize, f64)>;

/// Bottom eigenpairs of a PSD operator by stochastic Riemannian descent of
/// tr(YᵀLY) on the Stiefel manifold YᵀY = E.
pub fn minibatch_stiefel(
    op: &(impl SymmetricOperator + ?Sized),
    budget: &SolverBudget,
) -> Result<SpectralEmbedding, SolverError> {
    minibatch_stiefel_traced(op, budget).map(|(e, _)| e)
}

/// As [`minibatch_stiefel`], also returning the trace objective sampled every
/// 50 steps.
///
/// Each step samples a batch of rows S and uses the variance-reduced gradient
/// G = L Ỹ + (N/|S|) L[:, S] (Y − Ỹ)[S, :], where Ỹ is the iterate at the last
/// window boundary and L Ỹ was computed in full there. G is projected onto the
/// tangent space (G − Y sym(YᵀG)), a step of 1/(ρ √(1 + t/100)) is taken with ρ
/// bounding ‖L‖, and the result is retracted by thin QR.
pub fn minibatch_stiefel_traced(
    op: &(impl SymmetricOperator + ?Sized),
    budget: &SolverBudget,
) -> Result<(SpectralEmbedding, TraceHistory), SolverError> {
    let n = op.dim();
    budget.validate(n)?;
    let k = budget.n_eig;
    let batch = budget.resolved_batch(n);
    let rho = op.norm_bound().max(f64::MIN_POSITIVE);
    let mut rng = rng::stream(budget.seed, "minibatch");

    let init = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    let mut y = orthonormalize(init);
    let mut anchor = y.clone();
    let mut anchor_grad = op.apply(&y);
    let mut history: TraceHistory = Vec::new();
    let scale = n as f64 / batch as f64;

    let mut t = 0;
    loop {
        if t % WINDOW == 0 {
            if t > 0 {
                anchor = y.clone();
                anchor_grad = op.apply(&y);
            }
            let trace = y.dot(&anchor_grad);
            let stalled = history
                .last()
                .is_some_and(|&(_, prev)| (prev - trace).abs() < budget.tol * prev.abs().max(1.0));
            history.push((t, trace));
            if stalled || t >= budget.n_iter {
                break;
            }
        }
        let mut rows = index::sample(&mut rng, n, batch).into_vec();
        rows.sort_unstable();
        let delta = DMatrix::from_fn(batch, k, |r, c| y[(rows[r], c)] - anchor[(rows[r], c)]);
        let mut g = op.apply_columns(&rows, &delta);
        g *= scale;
        g += &anchor_grad;
        let ytg = y.tr_mul(&g);
        let sym = (&ytg + ytg.transpose()) * 0.5;
        let grad = g - &y * sym;
        let step = 1.0 / (rho * (1.0 + t as f64 / 100.0).sqrt());
        y = orthonormalize(&y - grad * step);
        t += 1;
    }

    // Rayleigh–Ritz on the final subspace
    let ly = op.apply(&y);
    let small = y.tr_mul(&ly);
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymEig::new(small);
    let (values, rot) = sorted_pairs(eig.eigenvalues.as_slice(), &eig.eigenvectors, k);
    if values[0] < -1e-6 {
        return Err(SolverError::Domain(format!(
            "operator is not positive semidefinite (Rayleigh quotient {:e})",
            values[0]
        )));
    }
    let vectors = &y * &rot;
    let lv = ly * &rot;
    let residual = (0..k).map(|c| (lv.column(c) - vectors.column(c) * values[c]).norm()).fold(0.0, f64::max);
    let mut e = SpectralEmbedding::new(vectors, values, SolverKind::Minibatch);
    e.canonicalize_signs();
    e.residual = Some(residual);
    e.converged = t < budget.n_iter || residual <= budget.tol;
    if !e.converged {
        e.warnings.push(format!("minibatch stopped at {t} steps with residual {residual:e}"));
    }
    Ok((e, history))
}
