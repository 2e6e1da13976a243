//! Fréchet distance between Gaussian fits of two feature sets.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Covariance regularizer added to both diagonals.
pub const FID_EPS: f64 = 1e-6;

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    for i in 0..dim {
        cov[(i, i)] += FID_EPS;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `||μa − μb||² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, the trace of the square
/// root taken through the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::invalid("fid: empty feature set"));
    }
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(Error::shape("fid", &[dim], &[v.len()]));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("fid features".into()));
        }
    }
    for set in [a, b] {
        if set.len() < dim + 1 {
            return Err(Error::TooFewSamples {
                needed: dim + 1,
                got: set.len(),
            });
        }
    }
    let (mu_a, cov_a) = moments(a, dim);
    let (mu_b, cov_b) = moments(b, dim);
    let root_a = sym_sqrt(&cov_a);
    let mut inner = &root_a * &cov_b * &root_a;
    // symmetrize rounding noise before the eigensolver
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| libm::sqrt(l.max(0.0))).sum();
    let diff = mu_a - mu_b;
    Ok(diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}
