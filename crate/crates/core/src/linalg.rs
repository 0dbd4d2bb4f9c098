//! Dense complex matrix utilities.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>`, which is column-major, so
//! `vec` is column stacking and matches the `vec(S X)` convention used by the
//! measurement model. Covariances that the message-passing engine inverts are
//! carried as [`HermitianPsd`], which hermitizes and floors eigenvalues on
//! construction.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{HvmpError, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Relative eigenvalue floor applied when constructing a [`HermitianPsd`].
pub const PSD_RELATIVE_FLOOR: f64 = 1e-12;
/// Relative Frobenius tolerance for the Hermitian check.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Condition number above which `inv_sqrt` refuses to whiten.
pub const MAX_CONDITION: f64 = 1e14;
/// Default element guard for Kronecker assembly.
pub const DEFAULT_KRON_GUARD: usize = 4096;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Column stacking.
pub fn vec(m: &CMatrix) -> CVector {
    CVector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &CVector, rows: usize, cols: usize) -> Result<CMatrix> {
    if v.len() != rows * cols {
        return Err(HvmpError::Dimension(format!(
            "cannot unvec length {} into {}x{}",
            v.len(),
            rows,
            cols
        )));
    }
    Ok(CMatrix::from_column_slice(rows, cols, v.as_slice()))
}

pub fn fro_norm_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

pub fn is_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    let num = fro_norm_sq(&(a - b)).sqrt();
    let den = fro_norm_sq(b).sqrt().max(f64::MIN_POSITIVE);
    num / den
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

fn is_diagonal(m: &CMatrix, tol: f64) -> bool {
    let scale = fro_norm_sq(m).sqrt();
    let mut off = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j {
                off += m[(i, j)].norm_sqr();
            }
        }
    }
    off.sqrt() <= tol * scale.max(f64::MIN_POSITIVE)
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
fn eigh(m: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    if !is_finite(m) {
        return Err(HvmpError::Numeric(
            "non-finite entry in Hermitian eigendecomposition input".into(),
        ));
    }
    let n = m.nrows();
    if is_diagonal(m, 0.0) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| m[(a, a)].re.total_cmp(&m[(b, b)].re));
        let vals = idx.iter().map(|&i| m[(i, i)].re).collect();
        let mut vecs = CMatrix::zeros(n, n);
        for (col, &i) in idx.iter().enumerate() {
            vecs[(i, col)] = c(1.0, 0.0);
        }
        return Ok((vals, vecs));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0)
        .ok_or_else(|| HvmpError::Numeric("Hermitian eigendecomposition did not converge".into()))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMatrix::from_fn(n, n, |r, col| eig.eigenvectors[(r, idx[col])]);
    Ok((vals, vecs))
}

fn reassemble(vecs: &CMatrix, vals: &[f64]) -> CMatrix {
    let mut scaled = vecs.clone();
    for (j, &v) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    hermitian_part(&(scaled * vecs.adjoint()))
}

/// A Hermitian positive semi-definite matrix.
///
/// Construction hermitizes the input and clamps eigenvalues from below at
/// `PSD_RELATIVE_FLOOR · λ_max`, so every value of this type satisfies the
/// Hermitian and PSD invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianPsd {
    matrix: CMatrix,
}

impl HermitianPsd {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(HvmpError::Dimension(format!(
                "covariance must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let h = hermitian_part(&m);
        let scale = fro_norm_sq(&h).sqrt();
        if fro_norm_sq(&(&m - &h)).sqrt() > HERMITIAN_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(HvmpError::Domain("matrix is not Hermitian within tolerance".into()));
        }
        let (vals, _) = eigh(&h)?;
        let lmax = vals.last().copied().unwrap_or(0.0).max(0.0);
        hermitize_floor(&h, PSD_RELATIVE_FLOOR * lmax)
    }

    pub fn identity(dim: usize) -> Self {
        HermitianPsd {
            matrix: CMatrix::identity(dim, dim),
        }
    }

    /// Diagonal matrix with the given non-negative entries.
    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        if d.iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return Err(HvmpError::Domain(
                "diagonal covariance entries must be finite and non-negative".into(),
            ));
        }
        let n = d.len();
        Ok(HermitianPsd {
            matrix: CMatrix::from_fn(n, n, |i, j| if i == j { c(d[i], 0.0) } else { c(0.0, 0.0) }),
        })
    }

    pub fn scaled_identity(dim: usize, v: f64) -> Result<Self> {
        Self::from_diagonal(&vec![v; dim])
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.matrix[(i, i)].re).collect()
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        is_diagonal(&self.matrix, tol)
    }

    /// Projection onto the diagonal (off-diagonal entries dropped).
    pub fn diagonal_part(&self) -> HermitianPsd {
        let d = self.diagonal();
        let n = d.len();
        HermitianPsd {
            matrix: CMatrix::from_fn(n, n, |i, j| if i == j { c(d[i].max(0.0), 0.0) } else { c(0.0, 0.0) }),
        }
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(eigh(&self.matrix)?.0)
    }

    pub fn condition_number(&self) -> Result<f64> {
        let vals = self.eigenvalues()?;
        let lo = vals.first().copied().unwrap_or(0.0);
        let hi = vals.last().copied().unwrap_or(0.0);
        Ok(if lo <= 0.0 { f64::INFINITY } else { hi / lo })
    }

    /// Inverse of a positive-definite covariance, scaled by `scale`.
    pub fn inverse_scaled(&self, scale: f64, name: &str) -> Result<HermitianPsd> {
        let (vals, vecs) = eigh(&self.matrix)?;
        let hi = vals.last().copied().unwrap_or(0.0);
        let lo = vals.first().copied().unwrap_or(0.0);
        if !(hi > 0.0) || lo <= 0.0 || hi / lo > MAX_CONDITION {
            return Err(HvmpError::Singular {
                name: name.to_string(),
                condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
            });
        }
        let inv: Vec<f64> = vals.iter().map(|&v| scale / v).collect();
        Ok(HermitianPsd {
            matrix: reassemble(&vecs, &inv),
        })
    }
}

/// Returns `(M + Mᴴ)/2` with eigenvalues clamped to at least `floor`.
///
/// Inputs whose Hermitian part already has every eigenvalue `≥ floor` are
/// returned without re-assembly, so the operation is idempotent.
pub fn hermitize_floor(m: &CMatrix, floor: f64) -> Result<HermitianPsd> {
    if !m.is_square() {
        return Err(HvmpError::Dimension(format!(
            "hermitize_floor needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let h = hermitian_part(m);
    let (vals, vecs) = eigh(&h)?;
    // tolerate eigensolver roundoff so that a second pass is a no-op
    let slack = PSD_RELATIVE_FLOOR * vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if vals.iter().all(|&v| v >= floor - slack) {
        return Ok(HermitianPsd { matrix: h });
    }
    let clamped: Vec<f64> = vals.iter().map(|&v| v.max(floor)).collect();
    Ok(HermitianPsd {
        matrix: reassemble(&vecs, &clamped),
    })
}

/// Hermitian inverse square root `R` with `R C Rᴴ = I`.
pub fn inv_sqrt(cov: &HermitianPsd, name: &str) -> Result<CMatrix> {
    let (vals, vecs) = eigh(cov.matrix())?;
    let hi = vals.last().copied().unwrap_or(0.0);
    let lo = vals.first().copied().unwrap_or(0.0);
    if !(hi > 0.0) || lo <= 0.0 || hi / lo > MAX_CONDITION {
        return Err(HvmpError::Singular {
            name: name.to_string(),
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }
    let w: Vec<f64> = vals.iter().map(|&v| 1.0 / v.sqrt()).collect();
    Ok(reassemble(&vecs, &w))
}

/// Hermitian square root of a PSD matrix.
pub fn sqrt_psd(cov: &HermitianPsd) -> Result<CMatrix> {
    let (vals, vecs) = eigh(cov.matrix())?;
    let w: Vec<f64> = vals.iter().map(|&v| v.max(0.0).sqrt()).collect();
    Ok(reassemble(&vecs, &w))
}

/// Kronecker product, refusing results larger than `guard × guard`.
pub fn kron(a: &CMatrix, b: &CMatrix, guard: usize) -> Result<CMatrix> {
    let rows = a.nrows() * b.nrows();
    let cols = a.ncols() * b.ncols();
    if rows > guard || cols > guard {
        return Err(HvmpError::Size {
            rows,
            cols,
            limit: guard,
        });
    }
    Ok(a.kronecker(b))
}

/// Covariance factor of a matrix Gaussian: either the identity of the given
/// dimension or a full Hermitian PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Identity(usize),
    Full(HermitianPsd),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Identity(n) => *n,
            Covariance::Full(m) => m.dim(),
        }
    }

    pub fn to_matrix(&self) -> CMatrix {
        match self {
            Covariance::Identity(n) => CMatrix::identity(*n, *n),
            Covariance::Full(m) => m.matrix().clone(),
        }
    }
}

/// `CMN(mean, row_cov, col_cov)`.
///
/// Convention for the single-sided forms used by the engine: in
/// `CMN(M, U, I)` the columns are independent with covariance `U`; in
/// `CMN(M, I, V)` the rows are independent and each row `s` satisfies
/// `E[(s − m)ᴴ (s − m)] = V`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGaussian {
    pub mean: CMatrix,
    pub row_cov: Covariance,
    pub col_cov: Covariance,
}

impl MatrixGaussian {
    pub fn new(mean: CMatrix, row_cov: Covariance, col_cov: Covariance) -> Result<Self> {
        if row_cov.dim() != mean.nrows() || col_cov.dim() != mean.ncols() {
            return Err(HvmpError::Dimension(format!(
                "matrix Gaussian mean is {}x{} but covariances are {} and {}",
                mean.nrows(),
                mean.ncols(),
                row_cov.dim(),
                col_cov.dim()
            )));
        }
        if matches!(row_cov, Covariance::Full(_)) && matches!(col_cov, Covariance::Full(_)) {
            return Err(HvmpError::Domain(
                "at most one covariance factor may be non-identity".into(),
            ));
        }
        Ok(MatrixGaussian { mean, row_cov, col_cov })
    }

    /// `CMN(mean, cov, I)`.
    pub fn column_form(mean: CMatrix, cov: HermitianPsd) -> Result<Self> {
        let cols = mean.ncols();
        Self::new(mean, Covariance::Full(cov), Covariance::Identity(cols))
    }

    /// `CMN(mean, I, cov)`.
    pub fn row_form(mean: CMatrix, cov: HermitianPsd) -> Result<Self> {
        let rows = mean.nrows();
        Self::new(mean, Covariance::Identity(rows), Covariance::Full(cov))
    }

    /// The non-identity factor, if any.
    pub fn covariance(&self) -> Option<&HermitianPsd> {
        match (&self.row_cov, &self.col_cov) {
            (Covariance::Full(m), _) | (_, Covariance::Full(m)) => Some(m),
            _ => None,
        }
    }
}
