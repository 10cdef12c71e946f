//! Dense symmetric linear algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest accepted ratio between extreme eigenvalues of a matrix we invert.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Eigenvalues below `-PSD_TOLERANCE * max(1, largest)` mean "not PSD".
pub const PSD_TOLERANCE: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

fn checked_spd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid(format!("{what} must be square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    let e = eigen(m);
    let max = e.eigenvalues.max();
    let min = e.eigenvalues.min();
    if !(min > 0.0) || max / min > CONDITION_LIMIT {
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(Error::Singular { what: what.to_string(), condition });
    }
    Ok(e)
}

fn from_eigen(e: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &e.eigenvectors;
    let d = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|&l| f(l)));
    let scaled = v * DMatrix::from_diagonal(&d);
    symmetrize(&(scaled * v.transpose()))
}

/// Inverse of a symmetric positive-definite matrix, refusing ill-conditioned input.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    checked_spd_eigen(m, what)?;
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Singular { what: what.to_string(), condition: f64::INFINITY })?;
    Ok(symmetrize(&chol.inverse()))
}

/// Symmetric square root of a positive-definite matrix.
pub fn spd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = checked_spd_eigen(m, what)?;
    Ok(from_eigen(&e, f64::sqrt))
}

/// Symmetric inverse square root of a positive-definite matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = checked_spd_eigen(m, what)?;
    Ok(from_eigen(&e, |l| 1.0 / l.sqrt()))
}

/// Symmetric square root of a positive-semidefinite matrix.
///
/// Slightly negative eigenvalues from round-off are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let e = eigen(m);
    let min = e.eigenvalues.min();
    let scale = e.eigenvalues.amax().max(1.0);
    if min < -PSD_TOLERANCE * scale || !min.is_finite() {
        return Err(Error::NotPsd { what: what.to_string(), min_eigenvalue: min });
    }
    Ok(from_eigen(&e, |l| l.max(0.0).sqrt()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eigen(m).eigenvalues.min()
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sorted_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = eigen(m).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Sample covariance of the columns of `data` (rows are observations), divisor `n - 1`.
pub fn covariance(data: &DMatrix<f64>) -> DMatrix<f64> {
    cross_covariance(data, data)
}

/// Sample cross-covariance between the columns of `a` and of `b`, divisor `n - 1`.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, b.nrows(), "row counts differ");
    let ca = center_columns(a);
    let cb = center_columns(b);
    ca.transpose() * cb / (n as f64 - 1.0)
}

pub fn center_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = a.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    c
}

/// Submatrix with the given rows and columns, in the order given.
pub fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// True when `c` has full row rank, judged by the conditioning of `c c'`.
pub fn has_full_row_rank(c: &DMatrix<f64>) -> bool {
    if c.nrows() == 0 || c.nrows() > c.ncols() {
        return false;
    }
    let e = eigen(&(c * c.transpose()));
    let max = e.eigenvalues.max();
    let min = e.eigenvalues.min();
    min > 0.0 && max / min <= CONDITION_LIMIT
}
