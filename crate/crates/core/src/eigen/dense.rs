use nalgebra::DMatrix;

use super::symeig::SymEig;
use super::{sorted_pairs, SolverError, SolverKind, SpectralEmbedding};

/// Largest matrix the dense reference solver accepts by default.
pub const DENSE_CAP: usize = 2000;

/// Smallest `n_eig` eigenpairs by full symmetric decomposition.
pub fn dense_eigh(m: &DMatrix<f64>, n_eig: usize) -> Result<SpectralEmbedding, SolverError> {
    dense_eigh_capped(m, n_eig, DENSE_CAP)
}

pub fn dense_eigh_capped(m: &DMatrix<f64>, n_eig: usize, cap: usize) -> Result<SpectralEmbedding, SolverError> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(SolverError::Parameter(format!("matrix is {}×{}, not square", n, m.ncols())));
    }
    if n > cap {
        return Err(SolverError::Size { n, cap });
    }
    if n_eig == 0 || n_eig > n {
        return Err(SolverError::Parameter(format!("n_eig = {n_eig} must lie in [1, {n}]")));
    }
    // Symmetrize away rounding asymmetry so the decomposition sees one triangle's intent.
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymEig::new(sym);
    let (values, vectors) = sorted_pairs(eig.eigenvalues.as_slice(), &eig.eigenvectors, n_eig);
    let mut e = SpectralEmbedding::new(vectors, values, SolverKind::Dense);
    e.canonicalize_signs();
    e.residual = Some(e.residual_against(m));
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_node_laplacian() {
        let l = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let e = dense_eigh(&l, 2).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.eigenvalues[1], 2.0, epsilon = 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(e.vectors[(0, 0)], s, epsilon = 1e-12);
        assert_abs_diff_eq!(e.vectors[(1, 0)], s, epsilon = 1e-12);
        assert!(e.residual.unwrap() <= 1e-8 * 2.0);
    }

    #[test]
    fn complete_graph_k3_sym() {
        let w = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        let l = DMatrix::identity(3, 3) - w / 2.0;
        let e = dense_eigh(&l, 3).unwrap();
        for (got, want) in e.eigenvalues.iter().zip([0.0, 1.5, 1.5]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let gram = e.vectors.transpose() * &e.vectors;
        assert_abs_diff_eq!(gram, DMatrix::identity(3, 3), epsilon = 1e-12);
    }

    #[test]
    fn diagonal_input() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let e = dense_eigh(&m, 3).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.vectors[(1, 0)], 1.0);
    }

    #[test]
    fn cap_is_enforced() {
        let m = DMatrix::<f64>::identity(5, 5);
        assert_eq!(dense_eigh_capped(&m, 1, 4), Err(SolverError::Size { n: 5, cap: 4 }));
        assert!(dense_eigh(&m, 6).is_err());
    }
}
