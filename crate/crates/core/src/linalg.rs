//! Small shared dense linear-algebra helpers (crate internal).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// `0.5 (M + Mᵀ)`, used to keep covariance iterates symmetric.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = avg;
            out[(j, i)] = avg;
        }
    }
    out
}

/// Cholesky factorization with a descriptive error instead of an `Option`.
pub(crate) fn spd_cholesky(m: DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or(Error::NotSpd { context })
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub(crate) fn spd_inverse(m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(m.clone(), context)?.inverse())
}

/// `Vᵀ diag(d) V` — the spectral-domain image of a diagonal vertex weighting.
pub(crate) fn weighted_gram(v: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let n = v.nrows();
    let mut scaled = v.clone();
    for i in 0..n {
        let w = d[i];
        for k in 0..n {
            scaled[(i, k)] *= w;
        }
    }
    v.transpose() * scaled
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_gram_matches_rank_one_sum() {
        let v = DMatrix::from_row_slice(3, 3, &[0.1, 0.4, 0.7, 0.2, 0.5, 0.8, 0.3, 0.6, 0.9]);
        let d = DVector::from_vec(vec![2.0, 0.0, 0.5]);
        let fast = weighted_gram(&v, &d);
        let mut slow = DMatrix::zeros(3, 3);
        for i in 0..3 {
            let row = v.row(i).transpose();
            slow += d[i] * &row * row.transpose();
        }
        assert!((fast - slow).norm() < 1e-12);
    }
}
