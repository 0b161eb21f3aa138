//! Full symmetric eigendecomposition: Householder reduction to tridiagonal
//! form followed by implicit QL iterations (the classic tred2/tql2 pair).

use nalgebra::{DMatrix, DVector};

/// Column-major n × n scratch matrix.
struct Square {
    n: usize,
    a: Vec<f64>,
}

impl Square {
    #[inline(always)]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[c * self.n + r]
    }
    #[inline(always)]
    fn set(&mut self, r: usize, c: usize, v: f64) {
        self.a[c * self.n + r] = v;
    }
    #[inline(always)]
    fn col_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.a[c * self.n..(c + 1) * self.n]
    }
}

/// Eigen-decomposition with the same field layout as nalgebra's, in
/// ascending eigenvalue order.
pub struct SymEig {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymEig {
    pub fn new(m: DMatrix<f64>) -> Self {
        let (values, eigenvectors) = symmetric_eigen(&m);
        Self { eigenvalues: DVector::from_vec(values), eigenvectors }
    }
}

/// Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a
/// symmetric matrix. Only the lower triangle is read.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "square matrix required");
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let mut v = Square { n, a: m.as_slice().to_vec() };
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e);
    finish(v, d)
}

/// Eigenpairs of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off` (`off[i]` couples i and i + 1).
pub fn tridiagonal_eigen(diag: &[f64], off: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = diag.len();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let mut v = Square { n, a: vec![0.0; n * n] };
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let mut d = diag.to_vec();
    // tql2 expects the sub-diagonal in e[1..n]
    let mut e = vec![0.0; n];
    e[1..n].copy_from_slice(&off[..n - 1]);
    tql2(&mut v, &mut d, &mut e);
    finish(v, d)
}

fn finish(v: Square, d: Vec<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = v.n;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| d[i]).collect();
    let mut out = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        out.column_mut(k).copy_from_slice(&v.a[i * n..(i + 1) * n]);
    }
    (values, out)
}

fn tred2(v: &mut Square, d: &mut [f64], e: &mut [f64]) {
    let n = v.n;
    for j in 0..n {
        d[j] = v.at(n - 1, j);
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v.at(i - 1, j);
                v.set(i, j, 0.0);
                v.set(j, i, 0.0);
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                let f = d[j];
                v.set(j, i, f);
                let mut g = e[j] + v.at(j, j) * f;
                let col = &v.a[j * n..(j + 1) * n];
                for k in j + 1..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let (f, g) = (d[j], e[j]);
                let col = v.col_mut(j);
                for k in j..i {
                    col[k] -= f * e[k] + g * d[k];
                }
                d[j] = col[i - 1];
                col[i] = 0.0;
            }
        }
        d[i] = h;
    }
    // accumulate the transformations
    for i in 0..n - 1 {
        let vii = v.at(i, i);
        v.set(n - 1, i, vii);
        v.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v.at(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v.at(k, i + 1) * v.at(k, j);
                }
                let col = v.col_mut(j);
                for k in 0..=i {
                    col[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v.set(k, i + 1, 0.0);
        }
    }
    for j in 0..n {
        d[j] = v.at(n - 1, j);
        v.set(n - 1, j, 0.0);
    }
    v.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

fn tql2(v: &mut Square, d: &mut [f64], e: &mut [f64]) {
    let n = v.n;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            loop {
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (left, right) = v.a.split_at_mut((i + 1) * n);
                    let ci = &mut left[i * n..];
                    let ci1 = &mut right[..n];
                    for k in 0..n {
                        let h = ci1[k];
                        ci1[k] = s * ci[k] + c * h;
                        ci[k] = c * ci[k] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}
