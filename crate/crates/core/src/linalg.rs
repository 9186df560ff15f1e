//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng;

/// `n x k` matrix with Haar-distributed orthonormal columns.
///
/// QR of a Gaussian matrix, with column signs fixed so that `diag(R) > 0`.
pub fn haar_frame<R: rand::Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(k <= n && n > 0);
    let g = DMatrix::from_fn(n, k, |_, _| rng::normal(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn haar_orthogonal<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    haar_frame(n, n, rng)
}

/// Haar-random orthogonal `n x n` matrix from a seed.
pub fn sample_orthogonal(n: usize, seed: u64) -> DMatrix<f64> {
    haar_orthogonal(n, &mut rng::stream(seed, rng::purpose::HAAR_BLOCK, 0))
}

/// Symmetric square root of a positive semidefinite matrix.
///
/// Eigenvalues below `-tol * max|lambda|` are rejected; smaller negative
/// round-off is clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol * scale.max(1.0) {
        return Err(Error::Model(format!("covariance is not positive semidefinite (min eigenvalue {min:.3e})")));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let u = &eig.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&d) * u.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_matrix_is_orthogonal() {
        let q = sample_orthogonal(40, 5);
        let e = &q.transpose() * &q - DMatrix::identity(40, 40);
        assert!(e.amax() < 1e-12);
    }

    #[test]
    fn frame_columns_are_orthonormal() {
        let mut r = rng::stream(1, 0, 0);
        let f = haar_frame(30, 7, &mut r);
        assert_eq!(f.shape(), (30, 7));
        assert!((&f.transpose() * &f - DMatrix::identity(7, 7)).amax() < 1e-12);
    }

    #[test]
    fn haar_first_entry_is_unbiased() {
        // Without the sign fix the (0,0) entry of the Q factor is biased negative.
        let n = 8;
        let mut r = rng::stream(9, 0, 0);
        let samples: Vec<f64> = (0..4000).map(|_| haar_orthogonal(n, &mut r)[(0, 0)]).collect();
        let e = crate::stats::Estimate::from_samples(&samples);
        assert!(e.mean.abs() < 4.0 * e.stderr, "{e:?}");
        // E[Q00^2] = 1/n
        let sq = crate::stats::Estimate::from_samples(&samples.iter().map(|v| v * v).collect::<Vec<_>>());
        assert!(sq.agrees_with(1.0 / n as f64, 4.0), "{sq:?}");
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let s = psd_sqrt(&a, 1e-10).unwrap();
        assert!((&s * &s - &a).amax() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_sqrt(&bad, 1e-10).is_err());
    }
}
