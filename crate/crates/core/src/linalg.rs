//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Each eigenvector is signed so that its largest-magnitude entry is positive.
pub(crate) fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = m.nrows();
    if k == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(k, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(k, k);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let mut best = 0;
        for r in 1..k {
            if col[r].abs() > col[best].abs() + 1e-12 {
                best = r;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

/// Symmetric positive semidefinite square root.
pub(crate) fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_desc(m);
    if vals.iter().any(|&v| v < -1e-12 * vals.amax().max(1.0)) {
        return Err(Error::RankDeficient(
            "matrix square root of an indefinite matrix".into(),
        ));
    }
    let d = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
    Ok(&vecs * d * vecs.transpose())
}

/// Solves `h x = rhs` for symmetric positive definite `h`, adding a 1e-8 ridge
/// when the Cholesky factorization fails.
pub(crate) fn spd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    let ridged = h + DMatrix::identity(h.nrows(), h.ncols()) * 1e-8;
    if let Some(ch) = ridged.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    ridged.lu().solve(rhs)
}

/// General inverse; `None` when the matrix is numerically singular.
pub(crate) fn inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let scale = m.amax();
    if !scale.is_finite() || scale == 0.0 {
        return None;
    }
    let inv = m.clone().try_inverse()?;
    let cond = inv.amax() * scale * m.nrows() as f64;
    if !cond.is_finite() || cond > 1e14 {
        return None;
    }
    Some(inv)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_with_sign_convention() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals.as_slice(), &[3.0, 1.0]);
        assert_eq!(vecs, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sym_sqrt(&m).unwrap();
        assert!((&s * &s - &m).amax() < 1e-12);
    }

    #[test]
    fn singular_inverse_is_none() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(inverse(&m).is_none());
    }
}
