//! Gaussian belief representation and small symmetric-matrix utilities.
//!
//! A belief is stored as the stacked vector `[mean; vech(cov)]` where `vech`
//! takes the lower triangle of the covariance in column-major order. Every
//! Jacobian and constraint selector in the crate uses this same ordering.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`vech`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues below `-PSD_TOL` are clamped by [`symmetrize_and_clamp`].
pub const PSD_TOL: f64 = 1e-9;

/// Number of entries in the half-vectorization of an `n x n` matrix.
pub fn vech_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Total dimension of a belief over an `n`-dimensional state.
pub fn belief_dim(n: usize) -> usize {
    n + vech_len(n)
}

/// Position of entry `(i, j)` (either triangle) inside `vech` of an `n x n` matrix.
pub fn vech_index(i: usize, j: usize, n: usize) -> usize {
    let (row, col) = if i >= j { (i, j) } else { (j, i) };
    // columns before `col` contribute n, n-1, ..., n-col+1 entries
    col * n - col * col.saturating_sub(1) / 2 + (row - col)
}

/// Half-vectorization of a symmetric matrix (lower triangle, column-major).
pub fn vech(s: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::Dimension {
            context: "vech (square matrix)",
            expected: n,
            actual: s.ncols(),
        });
    }
    let scale = s.amax().max(1.0);
    let mut worst: Option<(usize, usize, f64)> = None;
    for j in 0..n {
        for i in (j + 1)..n {
            let diff = (s[(i, j)] - s[(j, i)]).abs();
            if (diff.is_nan() || diff > SYMMETRY_TOL * scale) && worst.is_none_or(|w| diff > w.2 || diff.is_nan()) {
                worst = Some((i, j, diff));
            }
        }
    }
    if let Some((row, col, diff)) = worst {
        return Err(Error::Asymmetric { row, col, diff });
    }
    Ok(vech_unchecked(s))
}

/// Half-vectorization reading only the lower triangle.
pub(crate) fn vech_unchecked(s: &DMatrix<f64>) -> DVector<f64> {
    let n = s.nrows();
    let mut out = Vec::with_capacity(vech_len(n));
    for j in 0..n {
        for i in j..n {
            out.push(s[(i, j)]);
        }
    }
    DVector::from_vec(out)
}

/// Rebuilds the symmetric `n x n` matrix whose lower triangle is `v`.
pub fn unvech(v: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if v.len() != vech_len(n) {
        return Err(Error::Dimension {
            context: "unvech",
            expected: vech_len(n),
            actual: v.len(),
        });
    }
    let mut s = DMatrix::zeros(n, n);
    let mut idx = 0;
    for j in 0..n {
        for i in j..n {
            s[(i, j)] = v[idx];
            s[(j, i)] = v[idx];
            idx += 1;
        }
    }
    Ok(s)
}

/// `(S + S^T) / 2`, with negative eigenvalues clamped to zero when the
/// smallest one is below `-1e-9`.
pub fn symmetrize_and_clamp(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::Dimension {
            context: "symmetrize_and_clamp (square matrix)",
            expected: s.nrows(),
            actual: s.ncols(),
        });
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("symmetrize_and_clamp input"));
    }
    let sym = symmetrize(s);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= -PSD_TOL {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok(symmetrize(&rebuilt))
}

pub(crate) fn symmetrize(s: &DMatrix<f64>) -> DMatrix<f64> {
    (s + s.transpose()) * 0.5
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(s)).eigenvalues.max()
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues are
/// treated as zero so singular covariances are accepted.
pub fn sqrt_psd(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.nrows() == 0 {
        return s.clone();
    }
    let eig = SymmetricEigen::new(symmetrize(s));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Planar robot state. Heading is kept unwrapped while planning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl StateVector {
    pub const DIM: usize = 3;

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [x, y, theta] => Ok(Self::new(*x, *y, *theta)),
            _ => Err(Error::Dimension {
                context: "state vector",
                expected: Self::DIM,
                actual: v.len(),
            }),
        }
    }

    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.x, self.y, self.theta])
    }

    /// Heading wrapped to `(-pi, pi]`, for comparisons only.
    pub fn wrapped_heading(&self) -> f64 {
        wrap_angle(self.theta)
    }
}

/// Gaussian belief: state estimate plus half-vectorized covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov_vech: DVector<f64>,
}

impl Belief {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::Dimension {
                context: "belief covariance",
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        Ok(Self {
            mean,
            cov_vech: vech(cov)?,
        })
    }

    /// Splits a stacked `[mean; vech(cov)]` vector.
    pub fn from_vector(b: &DVector<f64>) -> Result<Self> {
        let n = state_dim_of(b.len())?;
        Ok(Self {
            mean: b.rows(0, n).into_owned(),
            cov_vech: b.rows(n, vech_len(n)).into_owned(),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.mean.len()).copy_from(&self.mean);
        out.rows_mut(self.mean.len(), self.cov_vech.len())
            .copy_from(&self.cov_vech);
        out
    }

    pub fn state_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len() + self.cov_vech.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        unvech(self.cov_vech.as_slice(), self.mean.len())
            .expect("belief covariance length is consistent by construction")
    }

    /// Diagonal of the covariance.
    pub fn variances(&self) -> DVector<f64> {
        let n = self.mean.len();
        DVector::from_iterator(n, (0..n).map(|i| self.cov_vech[vech_index(i, i, n)]))
    }
}

/// State dimension `n` of a stacked belief vector of length `n + n(n+1)/2`.
pub fn state_dim_of(belief_len: usize) -> Result<usize> {
    let mut n = 0;
    while belief_dim(n) < belief_len {
        n += 1;
    }
    if belief_dim(n) == belief_len {
        Ok(n)
    } else {
        Err(Error::Dimension {
            context: "belief vector length",
            expected: belief_dim(n),
            actual: belief_len,
        })
    }
}
