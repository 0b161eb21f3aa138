use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::symeig::tridiagonal_eigen;
use super::{sorted_pairs, SolverBudget, SolverError, SolverKind, SpectralEmbedding, SymmetricOperator};
use crate::rng;

/// Attempts at drawing a fresh start vector after an invariant subspace is hit.
const MAX_RESTARTS: usize = 3;

/// Ritz pairs for the `n_eig` smallest eigenvalues of a symmetric operator,
/// by Lanczos with full reorthogonalization.
///
/// The Krylov basis grows to at most `min(n_iter, N)` vectors. When β
/// vanishes the current Krylov space is invariant; a fresh seeded vector,
/// orthogonalized against the whole basis, continues the recurrence in a
/// decoupled block so repeated eigenvalues (disconnected graphs) are found.
pub fn lanczos_smallest(
    op: &(impl SymmetricOperator + ?Sized),
    budget: &SolverBudget,
) -> Result<SpectralEmbedding, SolverError> {
    let n = op.dim();
    let mut budget = budget.clone();
    budget.n_iter = budget.n_iter.min(n);
    budget.validate(n)?;
    let k = budget.n_eig;
    let m_max = budget.n_iter;
    let mut rng = rng::stream(budget.seed, "lanczos");

    let mut basis = DMatrix::<f64>::zeros(n, m_max);
    let mut alpha: Vec<f64> = Vec::with_capacity(m_max);
    let mut beta: Vec<f64> = Vec::with_capacity(m_max);
    let mut scale = op.norm_bound().max(f64::MIN_POSITIVE);
    let breakdown = 1e-10;

    let mut random_unit = |basis: &DMatrix<f64>, filled: usize| -> Option<DVector<f64>> {
        for _ in 0..MAX_RESTARTS {
            let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let v_norm0 = v.norm();
            orthogonalize(basis, filled, &mut v);
            let nv = v.norm();
            if nv > 1e-8 * v_norm0 {
                return Some(v / nv);
            }
        }
        None
    };

    let mut v = random_unit(&basis, 0).ok_or(SolverError::Convergence { residual: f64::INFINITY })?;
    let mut w = vec![0.0; n];
    let check_every = k.max(20);
    let mut m = 0;
    let mut converged = false;
    while m < m_max {
        basis.set_column(m, &v);
        op.apply_vec(v.as_slice(), &mut w);
        let mut wv = DVector::from_column_slice(&w);
        let a = v.dot(&wv);
        alpha.push(a);
        orthogonalize(&basis, m + 1, &mut wv);
        let b = wv.norm();
        m += 1;
        scale = scale.max(a.abs() + b);
        if m == m_max {
            beta.push(b);
            break;
        }
        if b <= breakdown * scale {
            beta.push(0.0);
            match random_unit(&basis, m) {
                Some(fresh) => v = fresh,
                None => {
                    let (residual, _) = estimate(&alpha, &beta, k);
                    return Err(SolverError::Convergence { residual });
                }
            }
        } else {
            beta.push(b);
            v = wv / b;
        }
        if m >= k && m % check_every == 0 {
            let (residual, _) = estimate(&alpha, &beta, k);
            if residual <= budget.tol {
                converged = true;
                break;
            }
        }
    }
    if m < k {
        return Err(SolverError::Convergence { residual: f64::INFINITY });
    }

    let (_, (values, s)) = estimate(&alpha, &beta, k);
    let ritz = basis.columns(0, m) * s;
    let mut e = SpectralEmbedding::new(ritz, values, SolverKind::Lanczos);
    e.canonicalize_signs();
    let residual = e.residual_against(op);
    e.residual = Some(residual);
    e.converged = converged || residual <= budget.tol.max(1e-8 * scale) || m == n;
    if !e.converged {
        e.warnings.push(format!("lanczos stopped at {m} iterations with residual {residual:e}"));
    }
    Ok(e)
}

/// Two passes of classical Gram–Schmidt against the first `filled` columns.
fn orthogonalize(basis: &DMatrix<f64>, filled: usize, v: &mut DVector<f64>) {
    if filled == 0 {
        return;
    }
    let q = basis.columns(0, filled);
    for _ in 0..2 {
        let h = q.tr_mul(v);
        *v -= &q * h;
    }
}

/// Smallest `k` Ritz values of the tridiagonal matrix and the largest
/// residual estimate |β_m · s_{m,i}| among them.
fn estimate(alpha: &[f64], beta: &[f64], k: usize) -> (f64, (Vec<f64>, DMatrix<f64>)) {
    let m = alpha.len();
    let (vals, vecs) = tridiagonal_eigen(alpha, &beta[..m - 1]);
    let (values, s) = sorted_pairs(&vals, &vecs, k.min(m));
    let last = beta.get(m - 1).copied().unwrap_or(0.0).abs();
    let residual = (0..s.ncols()).map(|c| last * s[(m - 1, c)].abs()).fold(0.0, f64::max);
    (residual, (values, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigen::{dense_eigh, max_principal_angle};
    use crate::sparse::CsrMatrix;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn path_laplacian(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n - 1 {
            t.push((i, i + 1, -1.0));
            t.push((i + 1, i, -1.0));
            t.push((i, i, 1.0));
            t.push((i + 1, i + 1, 1.0));
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    #[test]
    fn path_graph_matches_dense() {
        let l = path_laplacian(10);
        let e = lanczos_smallest(&l, &SolverBudget::new(4, 3).with_iter(10)).unwrap();
        let d = dense_eigh(&l.to_dense(), 4).unwrap();
        for c in 0..4 {
            assert_abs_diff_eq!(e.eigenvalues[c], d.eigenvalues[c], epsilon = 1e-8);
            // signs are canonicalized on both sides
            let diff = (e.vectors.column(c) - d.vectors.column(c)).amax();
            assert!(diff < 1e-6, "column {c}: {diff}");
        }
        // analytic path spectrum 2 − 2cos(πk/n)
        for (c, &ev) in e.eigenvalues.iter().enumerate() {
            let want = 2.0 - 2.0 * (std::f64::consts::PI * c as f64 / 10.0).cos();
            assert_abs_diff_eq!(ev, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_components_give_double_zero() {
        // two disjoint triangles
        let mut t = Vec::new();
        for base in [0, 3] {
            for i in 0..3 {
                for j in 0..3 {
                    t.push((base + i, base + j, if i == j { 2.0 } else { -1.0 }));
                }
            }
        }
        let l = CsrMatrix::from_triplets(6, 6, t);
        let e = lanczos_smallest(&l, &SolverBudget::new(2, 1).with_iter(6)).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(e.eigenvalues[1], 0.0, epsilon = 1e-10);
        // the null space is spanned by the two component indicators
        let ind = DMatrix::from_fn(6, 2, |i, c| if (i < 3) == (c == 0) { 1.0 } else { 0.0 });
        assert!(max_principal_angle(&e.vectors, &ind) < 1e-6);
    }

    #[test]
    fn truncated_iteration_reports_residual() {
        let l = path_laplacian(200);
        let e = lanczos_smallest(&l, &SolverBudget::new(3, 0).with_iter(12)).unwrap();
        assert!(e.residual.unwrap() > 0.0);
        assert_eq!(e.vectors.nrows(), 200);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn deterministic_given_seed() {
        let l = path_laplacian(50);
        let b = SolverBudget::new(3, 9).with_iter(30);
        assert_eq!(lanczos_smallest(&l, &b).unwrap(), lanczos_smallest(&l, &b).unwrap());
    }

    fn random_sparse(n: usize, seed: u64) -> CsrMatrix {
        let mut r = rng::stream(seed, "test/sparse");
        let mut t = Vec::new();
        for i in 0..n {
            for _ in 0..3 {
                let j = r.random_range(0..n);
                let v: f64 = r.random_range(-1.0..1.0);
                t.push((i, j, v));
                t.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn agrees_with_dense_on_random_sparse(n in 5usize..120, seed in 0u64..1000) {
            let a = random_sparse(n, seed);
            let k = 3.min(n);
            let e = lanczos_smallest(&a, &SolverBudget::new(k, seed).with_iter(n)).unwrap();
            let d = dense_eigh(&a.to_dense(), n).unwrap();
            for c in 0..k {
                prop_assert!((e.eigenvalues[c] - d.eigenvalues[c]).abs() < 1e-8);
            }
            // compare subspaces only where the k-th gap is not degenerate
            if n > k && d.eigenvalues[k] - d.eigenvalues[k - 1] > 1e-6 {
                let sub = d.vectors.columns(0, k).into_owned();
                prop_assert!(max_principal_angle(&e.vectors, &sub) < 1e-6);
            }
            let gram = e.vectors.transpose() * &e.vectors;
            prop_assert!((gram - DMatrix::identity(k, k)).amax() < 1e-6);
        }
    }
}
