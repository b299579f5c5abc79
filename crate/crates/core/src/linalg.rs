//! Dense linear algebra for summary-statistic moments.
//!
//! Matrices here are small (a few dozen rows at most), so everything is dense
//! and backed by `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest tolerated `|m[i][j] - m[j][i]|` for matrices treated as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Diagonal floor applied after eigenvalue clamping.
pub const PSD_DIAG_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean vector and covariance matrix of a summary vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: Vector,
    pub cov: Matrix,
}

impl MomentPair {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn snapshot(&self) -> MomentSnapshot {
        MomentSnapshot {
            mean: self.mean.iter().copied().collect(),
            cov: self
                .cov
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

/// Plain-data form of a [`MomentPair`], used for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSnapshot {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl MomentSnapshot {
    pub fn to_moments(&self) -> Result<MomentPair> {
        let d = self.mean.len();
        let mut cov = Matrix::zeros(d, d);
        for (i, row) in self.cov.iter().enumerate() {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                cov[(i, j)] = *v;
            }
        }
        MomentPair::new(Vector::from_vec(self.mean.clone()), cov)
    }
}

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL || asym.is_nan() {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Lower-triangular factor `L` with `L Lᵀ = m`.
///
/// `Ok(None)` is the failure signal for a matrix that is not numerically
/// positive definite; a non-symmetric input is a contract violation.
pub fn cholesky(m: &Matrix) -> Result<Option<Matrix>> {
    check_symmetric(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    Ok(nalgebra::Cholesky::new(m.clone()).map(|c| c.unpack()))
}

/// Nearest positive semi-definite matrix in Frobenius norm: eigenvalues are
/// clamped at zero and the matrix is rebuilt from the clamped spectrum.
pub fn nearest_psd(m: &Matrix) -> Result<Matrix> {
    check_symmetric(m)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let mut out = v * Matrix::from_diagonal(&clamped) * v.transpose();
    out = (&out + out.transpose()) * 0.5;
    for i in 0..out.nrows() {
        if out[(i, i)] < PSD_DIAG_FLOOR {
            out[(i, i)] = PSD_DIAG_FLOOR;
        }
    }
    Ok(out)
}

/// Diagonal jitter used for the single retry before declaring failure.
fn jitter(m: &Matrix) -> f64 {
    let d = m.nrows().max(1) as f64;
    let scale = (m.trace() / d).abs();
    1e-10 * if scale > 0.0 { scale } else { 1.0 }
}

/// Cholesky factor of `m`, repairing it first if necessary.
///
/// Order: plain factorization, then nearest-PSD repair plus one jittered
/// retry. `Ok(None)` when even that fails.
pub fn robust_cholesky(m: &Matrix) -> Result<Option<Matrix>> {
    if let Some(l) = cholesky(m)? {
        return Ok(Some(l));
    }
    let mut repaired = nearest_psd(m)?;
    let eps = jitter(&repaired);
    for i in 0..repaired.nrows() {
        repaired[(i, i)] += eps;
    }
    cholesky(&repaired)
}

/// Log density of `N(mp.mean, mp.cov)` at `x`.
pub fn mvn_logpdf(x: &Vector, mp: &MomentPair) -> Result<f64> {
    let d = mp.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let l = robust_cholesky(&mp.cov)?.ok_or(Error::SingularCovariance)?;
    logpdf_with_factor(x, &mp.mean, &l)
}

pub(crate) fn logpdf_with_factor(x: &Vector, mean: &Vector, l: &Matrix) -> Result<f64> {
    let d = mean.len();
    let diff = x - mean;
    let z = l
        .solve_lower_triangular(&diff)
        .ok_or(Error::SingularCovariance)?;
    let log_det_half: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let value = -0.5 * d as f64 * LN_2PI - log_det_half - 0.5 * z.norm_squared();
    if value.is_nan() {
        return Err(Error::SingularCovariance);
    }
    Ok(value)
}

/// One draw `mean + M z` with `M Mᵀ = cov` (repaired when needed).
pub fn mvn_sample<R: Rng + ?Sized>(mp: &MomentPair, rng: &mut R) -> Result<Vector> {
    let d = mp.dim();
    if mp.cov.iter().all(|&v| v == 0.0) {
        return Ok(mp.mean.clone());
    }
    let l = robust_cholesky(&mp.cov)?.ok_or(Error::SingularCovariance)?;
    let z = Vector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    Ok(&mp.mean + l * z)
}
