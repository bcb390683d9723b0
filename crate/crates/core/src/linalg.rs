use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative size of the first diagonal jitter, as a fraction of the mean diagonal.
pub const JITTER_BASE: f64 = 1e-8;
/// Number of times the jitter is doubled before giving up.
pub const JITTER_DOUBLINGS: u32 = 6;

/// Cholesky factorization that retries with diagonal jitter on failure.
///
/// The matrix is first factored as given. On failure, `1e-8 · mean(diag)` is
/// added to the diagonal and doubled up to six times. Returns the factor and
/// the jitter that was added (0 when none was needed).
pub fn cholesky_jittered(mat: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        return Some((chol, 0.0));
    }
    let n = mat.nrows();
    if n == 0 {
        return None;
    }
    let mean_diag = mat.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let mut jitter = JITTER_BASE * mean_diag.max(f64::MIN_POSITIVE);
    for _ in 0..=JITTER_DOUBLINGS {
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Some((chol, jitter));
        }
        jitter *= 2.0;
    }
    None
}

/// log|A| from the lower Cholesky factor of A.
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Solves L x = b for lower-triangular L (forward substitution).
pub fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut acc = x[i];
        for k in 0..i {
            acc -= l[(i, k)] * x[k];
        }
        x[i] = acc / l[(i, i)];
    }
    x
}

/// Solves (L Lᵀ) x = b given the lower factor L.
pub fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = forward_solve(l, b);
    for i in (0..n).rev() {
        let mut acc = x[i];
        for k in i + 1..n {
            acc -= l[(k, i)] * x[k];
        }
        x[i] = acc / l[(i, i)];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_gets_jitter() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let (chol, jitter) = cholesky_jittered(&m).expect("jitter should rescue rank one");
        assert!(jitter > 0.0);
        assert!(chol.l().diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn indefinite_matrix_fails() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_jittered(&m).is_none());
    }

    #[test]
    fn triangular_solves_agree_with_dense_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (chol, jitter) = cholesky_jittered(&a).unwrap();
        assert_eq!(jitter, 0.0);
        let x = chol_solve(&chol.l(), &b);
        let dense = a.clone().try_inverse().unwrap() * &b;
        assert!((x - dense).amax() < 1e-14);
        let logdet = log_det_from_factor(&chol.l());
        assert!((logdet - a.determinant().ln()).abs() < 1e-13);
    }
}
