//! Small dense kernels that the rest of the crate needs and ndarray lacks:
//! thin QR, Cholesky, and rank-revealing orthonormalisation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

/// Thin Householder QR of a tall `rows × cols` matrix (`rows >= cols`).
///
/// Returns `Q` (`rows × cols`, orthonormal columns) with the sign convention
/// that the diagonal of `R` is nonnegative, which makes the factorisation
/// unique for full-rank input.
pub fn thin_qr_q(a: ArrayView2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    assert!(m >= n, "thin_qr_q expects a tall matrix");
    let mut r = a.to_owned();
    let mut vs: Vec<Array1<f64>> = Vec::with_capacity(n);
    let mut diag_sign = vec![1.0; n];

    for j in 0..n {
        let x = r.slice(s![j.., j]).to_owned();
        let norm = x.dot(&x).sqrt();
        let mut v = x;
        if norm == 0.0 {
            vs.push(Array1::zeros(m - j));
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.dot(&v).sqrt();
        if vnorm > 0.0 {
            v /= vnorm;
            let mut block = r.slice_mut(s![j.., j..]);
            let proj = v.dot(&block);
            for (mut col, p) in block.columns_mut().into_iter().zip(proj.iter()) {
                col.scaled_add(-2.0 * p, &v);
            }
        }
        diag_sign[j] = if r[[j, j]] < 0.0 { -1.0 } else { 1.0 };
        vs.push(v);
    }

    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n unit columns.
    let mut q = Array2::<f64>::zeros((m, n));
    for j in 0..n {
        q[[j, j]] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &vs[j];
        let mut block = q.slice_mut(s![j.., ..]);
        let proj = v.dot(&block);
        for (mut col, p) in block.columns_mut().into_iter().zip(proj.iter()) {
            col.scaled_add(-2.0 * p, v);
        }
    }
    for (mut col, sign) in q.columns_mut().into_iter().zip(diag_sign) {
        col *= sign;
    }
    q
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not
/// numerically positive definite.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for p in 0..j {
                sum -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for p in 0..i {
            sum -= l[[i, p]] * y[p];
        }
        y[i] = sum / l[[i, i]];
    }
    y
}

/// Orthonormal basis (as rows) of the row span of `a`, found by modified
/// Gram-Schmidt with one re-orthogonalisation pass. Rows whose residual norm
/// falls below `rel_tol` times the largest input row norm are treated as
/// dependent.
pub fn row_span_basis(a: ArrayView2<f64>, rel_tol: f64) -> Array2<f64> {
    let scale = a
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    if scale == 0.0 {
        return Array2::zeros((0, a.ncols()));
    }
    for row in a.rows() {
        let mut v = row.to_owned();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.scaled_add(-c, b);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > rel_tol * scale {
            basis.push(v / norm);
        }
    }
    let mut out = Array2::zeros((basis.len(), a.ncols()));
    for (mut dst, b) in out.rows_mut().into_iter().zip(basis) {
        dst.assign(&b);
    }
    out
}
