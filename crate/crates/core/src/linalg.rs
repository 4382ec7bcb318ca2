//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{domain_err, Result};

/// Numerically stable `log(sum(exp(values)))`. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub fn softmax_in_place(values: &mut [f64]) -> f64 {
    let lse = log_sum_exp(values);
    for v in values.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Eigendecomposition of a symmetric PSD matrix. Eigenvalues above `-tol`
/// are clamped to zero; anything more negative is a domain error.
pub fn psd_eigen(m: &DMatrix<f64>, tol: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !m.is_square() {
        return domain_err("matrix is not square");
    }
    if max_asymmetry(m) > 1e-12 * (1.0 + m.amax()) {
        return domain_err("matrix is not symmetric");
    }
    if m.nrows() == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if min < -tol {
        return domain_err(format!("matrix is not PSD (smallest eigenvalue {min:e})"));
    }
    Ok((eig.eigenvalues.map(|v| v.max(0.0)), eig.eigenvectors))
}

/// Principal square root of a symmetric PSD matrix, eigenvalues clamped at 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let tol = 1e-10 * (1.0 + m.amax());
    let (vals, vecs) = psd_eigen(m, tol)?;
    let scaled = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&scaled * vecs.transpose())
}

/// Orthonormal basis of the column span of `m`, using a thin SVD. Columns
/// whose singular value falls below `rel_tol * max(1, largest)` are dropped.
pub fn column_span(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let top = svd.singular_values.max().max(1.0);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * top)
        .collect();
    DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])])
}

/// Extends orthonormal columns `basis` to `target` columns with Gram-Schmidt
/// over the standard basis vectors.
pub fn extend_orthonormal(basis: &DMatrix<f64>, target: usize) -> DMatrix<f64> {
    let d = basis.nrows();
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut e = 0;
    while cols.len() < target && e < d {
        let mut v = DVector::zeros(d);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let p = c.dot(&v);
                v.axpy(-p, c, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            cols.push(v / n);
        }
        e += 1;
    }
    if cols.is_empty() {
        return DMatrix::zeros(d, 0);
    }
    DMatrix::from_columns(&cols)
}

pub fn frobenius_relative(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (a - reference).norm() / reference.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_survives_large_exponents() {
        let v = [-1e6, -1e6 + 1.0];
        let expected = -1e6 + 1.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((log_sum_exp(&v) - expected).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let r = psd_sqrt(&a).unwrap();
        assert!((&r * &r - &a).amax() < 1e-12);
    }

    #[test]
    fn psd_eigen_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_eigen(&a, 1e-10).is_err());
    }

    #[test]
    fn span_detects_rank() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let b = column_span(&m, 1e-12);
        assert_eq!(b.ncols(), 1);
        let ext = extend_orthonormal(&b, 3);
        assert_eq!(ext.ncols(), 3);
        assert!((ext.transpose() * &ext - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
