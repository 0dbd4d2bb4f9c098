//! The measurement operator `A(·): C^{L×T} → C^N`.
//!
//! Three realizations are supported:
//!
//! * `Dense`: an explicit `N × LT` matrix.
//! * `PartialDft`: rows (or columns) of a unitary DFT matrix, either acting on
//!   `vec(W)` as a whole or on every column of `W` separately
//!   (`A = I_T ⊗ Φ`).
//! * `SvdPrefactored`: a dense matrix stored as its thin SVD.
//!
//! Besides `apply`/`adjoint` the operator provides the column blocks
//! `A_(i)` and the regularized solve `Aᴴ(ν̄AAᴴ + σ²I)⁻¹` used by the LMMSE
//! step, with closed-form fast paths when `A` has orthonormal rows or columns.

use std::f64::consts::PI;

use nalgebra::linalg::Cholesky;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HvmpError, Result};
use crate::linalg::{c, fro_norm_sq, kron, unvec, vec, CMatrix, CVector, DEFAULT_KRON_GUARD};

/// Tolerance for the orthogonality checks done at construction.
pub const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DftMode {
    /// Rows of the DFT are selected; the result has orthonormal rows.
    Row,
    /// Columns of the DFT are selected; the result has orthonormal columns.
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorScope {
    /// One matrix acting on `vec(W)`.
    Global,
    /// The same matrix acting on every column of `W`, `A = I_T ⊗ Φ`.
    PerColumn,
}

/// Serializable description of an operator. DFT operators are described by
/// their selection alone; dense operators are not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub kind: String,
    pub scope: OperatorScope,
    pub mode: DftMode,
    pub dft_dim: usize,
    pub selection: Vec<usize>,
    pub n: usize,
    pub l: usize,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub enum Realization {
    Dense(CMatrix),
    PartialDft {
        mode: DftMode,
        scope: OperatorScope,
        dft_dim: usize,
        selection: Vec<usize>,
        /// Materialized selected matrix: `N × LT` (global) or `N/T × L`
        /// (per column).
        kernel: CMatrix,
    },
    SvdPrefactored {
        u: CMatrix,
        singular_values: Vec<f64>,
        v_adj: CMatrix,
    },
}

/// Which evaluation of `Aᴴ(ν̄AAᴴ + σ²I)⁻¹` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmsePath {
    /// Explicit Cholesky solve of the `N × N` system.
    Dense,
    /// `A` has orthonormal rows or columns; no inversion needed.
    Orthogonal,
    /// Diagonal solve through the singular value decomposition.
    Svd,
}

#[derive(Debug, Clone)]
pub struct LinearOperator {
    n: usize,
    l: usize,
    t: usize,
    realization: Realization,
    fro_norm_sq: f64,
    partial_orthogonal: bool,
    column_orthogonal: bool,
}

fn gram_is_identity(g: &CMatrix) -> bool {
    let n = g.nrows();
    let err = fro_norm_sq(&(g - CMatrix::identity(n, n))).sqrt();
    err <= ORTHO_TOL * (n as f64).sqrt().max(1.0)
}

/// Unitary DFT matrix entry `exp(−2πi jk/d)/√d`.
fn dft_entry(j: usize, k: usize, d: usize) -> num_complex::Complex64 {
    let phase = -2.0 * PI * ((j * k) % d) as f64 / d as f64;
    c(phase.cos(), phase.sin()) / (d as f64).sqrt()
}

fn dft_selection(mode: DftMode, dim: usize, selection: &[usize], other: usize) -> CMatrix {
    match mode {
        DftMode::Row => CMatrix::from_fn(selection.len(), other, |r, col| dft_entry(selection[r], col, dim)),
        DftMode::Column => CMatrix::from_fn(other, selection.len(), |r, col| dft_entry(r, selection[col], dim)),
    }
}

impl LinearOperator {
    fn from_realization(n: usize, l: usize, t: usize, realization: Realization) -> Result<Self> {
        let (fro, rows_ortho, cols_ortho) = match &realization {
            Realization::Dense(a) => {
                let rows = a.nrows() <= a.ncols() && gram_is_identity(&(a * a.adjoint()));
                let cols = a.ncols() <= a.nrows() && gram_is_identity(&(a.adjoint() * a));
                (fro_norm_sq(a), rows, cols)
            }
            Realization::PartialDft { kernel, scope, .. } => {
                let rows = kernel.nrows() <= kernel.ncols() && gram_is_identity(&(kernel * kernel.adjoint()));
                let cols = kernel.ncols() <= kernel.nrows() && gram_is_identity(&(kernel.adjoint() * kernel));
                let reps = if *scope == OperatorScope::PerColumn {
                    t as f64
                } else {
                    1.0
                };
                (reps * fro_norm_sq(kernel), rows, cols)
            }
            Realization::SvdPrefactored {
                u,
                singular_values,
                v_adj,
            } => {
                let fro = singular_values.iter().map(|s| s * s).sum();
                let unit = singular_values.iter().all(|s| (s - 1.0).abs() <= ORTHO_TOL);
                let rows = unit && u.nrows() == singular_values.len() && v_adj.ncols() >= u.nrows();
                let cols = unit && v_adj.ncols() == singular_values.len() && u.nrows() >= v_adj.ncols();
                (fro, rows, cols)
            }
        };
        Ok(LinearOperator {
            n,
            l,
            t,
            realization,
            fro_norm_sq: fro,
            partial_orthogonal: rows_ortho,
            column_orthogonal: cols_ortho,
        })
    }

    /// Dense operator from its `N × LT` matrix form.
    pub fn dense(a: CMatrix, l: usize, t: usize) -> Result<Self> {
        if a.ncols() != l * t || l == 0 || t == 0 || a.nrows() == 0 {
            return Err(HvmpError::Dimension(format!(
                "dense operator is {}x{} but L·T = {}",
                a.nrows(),
                a.ncols(),
                l * t
            )));
        }
        let n = a.nrows();
        Self::from_realization(n, l, t, Realization::Dense(a))
    }

    /// Partial DFT acting on `vec(W)`: `N` random rows of the `LT`-point DFT
    /// when `N ≤ LT`, otherwise `LT` random columns of the `N`-point DFT.
    pub fn partial_dft<R: Rng + ?Sized>(n: usize, l: usize, t: usize, rng: &mut R) -> Result<Self> {
        Self::partial_dft_scoped(n, l, t, OperatorScope::Global, rng)
    }

    /// Partial DFT applied to every column of `W`: `n_per_column` rows (or
    /// `L` columns) of a DFT of size `max(n_per_column, L)`. The resulting
    /// operator has `N = n_per_column · T` outputs.
    pub fn partial_dft_per_column<R: Rng + ?Sized>(
        n_per_column: usize,
        l: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::partial_dft_scoped(n_per_column, l, t, OperatorScope::PerColumn, rng)
    }

    fn partial_dft_scoped<R: Rng + ?Sized>(
        rows: usize,
        l: usize,
        t: usize,
        scope: OperatorScope,
        rng: &mut R,
    ) -> Result<Self> {
        if rows == 0 || l == 0 || t == 0 {
            return Err(HvmpError::Dimension("partial DFT dimensions must be positive".into()));
        }
        let cols = match scope {
            OperatorScope::Global => l * t,
            OperatorScope::PerColumn => l,
        };
        let (mode, dim, count) = if rows <= cols {
            (DftMode::Row, cols, rows)
        } else {
            (DftMode::Column, rows, cols)
        };
        let mut selection = sample(rng, dim, count).into_vec();
        selection.sort_unstable();
        let n = match scope {
            OperatorScope::Global => rows,
            OperatorScope::PerColumn => rows * t,
        };
        let spec = OperatorSpec {
            kind: "partial_dft".into(),
            scope,
            mode,
            dft_dim: dim,
            selection,
            n,
            l,
            t,
        };
        Self::from_spec(&spec)
    }

    /// Rebuilds a DFT operator from its serialized description.
    pub fn from_spec(spec: &OperatorSpec) -> Result<Self> {
        if spec.kind != "partial_dft" {
            return Err(HvmpError::Config(format!("unsupported operator kind `{}`", spec.kind)));
        }
        let (rows, cols) = match spec.scope {
            OperatorScope::Global => (spec.n, spec.l * spec.t),
            OperatorScope::PerColumn => {
                if spec.t == 0 || !spec.n.is_multiple_of(spec.t) {
                    return Err(HvmpError::Dimension(format!(
                        "per-column operator needs N divisible by T (N = {}, T = {})",
                        spec.n, spec.t
                    )));
                }
                (spec.n / spec.t, spec.l)
            }
        };
        let (feasible, count, other) = match spec.mode {
            DftMode::Row => (rows <= cols && spec.dft_dim == cols, rows, cols),
            DftMode::Column => (cols <= rows && spec.dft_dim == rows, cols, rows),
        };
        if !feasible || spec.selection.len() != count {
            return Err(HvmpError::Dimension(format!(
                "infeasible partial DFT: {:?} mode with {} outputs, {} inputs, DFT size {}, {} selected",
                spec.mode,
                rows,
                cols,
                spec.dft_dim,
                spec.selection.len()
            )));
        }
        let mut seen = vec![false; spec.dft_dim];
        for &i in &spec.selection {
            if i >= spec.dft_dim || seen[i] {
                return Err(HvmpError::Dimension(format!(
                    "selection index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        let kernel = dft_selection(spec.mode, spec.dft_dim, &spec.selection, other);
        Self::from_realization(
            spec.n,
            spec.l,
            spec.t,
            Realization::PartialDft {
                mode: spec.mode,
                scope: spec.scope,
                dft_dim: spec.dft_dim,
                selection: spec.selection.clone(),
                kernel,
            },
        )
    }

    pub fn spec(&self) -> Option<OperatorSpec> {
        match &self.realization {
            Realization::PartialDft {
                mode,
                scope,
                dft_dim,
                selection,
                ..
            } => Some(OperatorSpec {
                kind: "partial_dft".into(),
                scope: *scope,
                mode: *mode,
                dft_dim: *dft_dim,
                selection: selection.clone(),
                n: self.n,
                l: self.l,
                t: self.t,
            }),
            _ => None,
        }
    }

    /// Thin-SVD form of a dense (or materializable) operator.
    pub fn svd_prefactor(&self) -> Result<Self> {
        let a = self.to_dense(usize::MAX)?;
        let svd = a.svd(true, true);
        let u = svd.u.ok_or_else(|| HvmpError::Numeric("SVD did not return U".into()))?;
        let v_adj = svd
            .v_t
            .ok_or_else(|| HvmpError::Numeric("SVD did not return Vᴴ".into()))?;
        let singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
        if singular_values.iter().any(|s| !s.is_finite()) {
            return Err(HvmpError::Numeric("non-finite singular value".into()));
        }
        Self::from_realization(
            self.n,
            self.l,
            self.t,
            Realization::SvdPrefactored {
                u,
                singular_values,
                v_adj,
            },
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn l(&self) -> usize {
        self.l
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn realization(&self) -> &Realization {
        &self.realization
    }

    /// `‖A‖_F²`.
    pub fn fro_norm_sq(&self) -> f64 {
        self.fro_norm_sq
    }

    /// `AAᴴ = I_N`, verified at construction.
    pub fn is_partial_orthogonal(&self) -> bool {
        self.partial_orthogonal
    }

    /// `AᴴA = I_LT`, verified at construction.
    pub fn is_column_orthogonal(&self) -> bool {
        self.column_orthogonal
    }

    fn per_column_kernel(&self) -> Option<&CMatrix> {
        match &self.realization {
            Realization::PartialDft {
                scope: OperatorScope::PerColumn,
                kernel,
                ..
            } => Some(kernel),
            _ => None,
        }
    }

    /// `A · vec(W)`.
    pub fn apply(&self, w: &CMatrix) -> Result<CVector> {
        if w.shape() != (self.l, self.t) {
            return Err(HvmpError::Dimension(format!(
                "operator expects {}x{} input, got {}x{}",
                self.l,
                self.t,
                w.nrows(),
                w.ncols()
            )));
        }
        Ok(match &self.realization {
            Realization::Dense(a) => a * vec(w),
            Realization::PartialDft {
                scope: OperatorScope::Global,
                kernel,
                ..
            } => kernel * vec(w),
            Realization::PartialDft { kernel, .. } => vec(&(kernel * w)),
            Realization::SvdPrefactored {
                u,
                singular_values,
                v_adj,
            } => {
                let mut z = v_adj * vec(w);
                for (zi, s) in z.iter_mut().zip(singular_values) {
                    *zi *= *s;
                }
                u * z
            }
        })
    }

    /// `unvec(Aᴴ y, L, T)`.
    pub fn adjoint(&self, y: &CVector) -> Result<CMatrix> {
        if y.len() != self.n {
            return Err(HvmpError::Dimension(format!(
                "adjoint expects length {}, got {}",
                self.n,
                y.len()
            )));
        }
        let v = self.adjoint_vec(y);
        unvec(&v, self.l, self.t)
    }

    fn adjoint_vec(&self, y: &CVector) -> CVector {
        match &self.realization {
            Realization::Dense(a) => a.adjoint() * y,
            Realization::PartialDft {
                scope: OperatorScope::Global,
                kernel,
                ..
            } => kernel.adjoint() * y,
            Realization::PartialDft { kernel, .. } => {
                let ym = CMatrix::from_column_slice(kernel.nrows(), self.t, y.as_slice());
                vec(&(kernel.adjoint() * ym))
            }
            Realization::SvdPrefactored {
                u,
                singular_values,
                v_adj,
            } => {
                let mut z = u.adjoint() * y;
                for (zi, s) in z.iter_mut().zip(singular_values) {
                    *zi *= *s;
                }
                v_adj.adjoint() * z
            }
        }
    }

    /// Full `N × LT` matrix form, subject to a size guard.
    pub fn to_dense(&self, guard: usize) -> Result<CMatrix> {
        let (rows, cols) = (self.n, self.l * self.t);
        if rows > guard || cols > guard {
            return Err(HvmpError::Size {
                rows,
                cols,
                limit: guard,
            });
        }
        Ok(match &self.realization {
            Realization::Dense(a) => a.clone(),
            Realization::PartialDft {
                scope: OperatorScope::Global,
                kernel,
                ..
            } => kernel.clone(),
            Realization::PartialDft { kernel, .. } => kron(&CMatrix::identity(self.t, self.t), kernel, usize::MAX)?,
            Realization::SvdPrefactored {
                u,
                singular_values,
                v_adj,
            } => {
                let mut us = u.clone();
                for (j, s) in singular_values.iter().enumerate() {
                    us.column_mut(j).scale_mut(*s);
                }
                us * v_adj
            }
        })
    }

    /// The `i`-th `N × L` column block `A_(i)` (zero-based `i < T`).
    pub fn block(&self, i: usize) -> Result<CMatrix> {
        if i >= self.t {
            return Err(HvmpError::Dimension(format!(
                "block index {i} out of range for T = {}",
                self.t
            )));
        }
        if let Some(kernel) = self.per_column_kernel() {
            let nc = kernel.nrows();
            let mut b = CMatrix::zeros(self.n, self.l);
            b.view_mut((i * nc, 0), (nc, self.l)).copy_from(kernel);
            return Ok(b);
        }
        let cols = i * self.l..(i + 1) * self.l;
        Ok(match &self.realization {
            Realization::Dense(a) => a.columns(cols.start, self.l).into_owned(),
            Realization::PartialDft { kernel, .. } => kernel.columns(cols.start, self.l).into_owned(),
            Realization::SvdPrefactored { .. } => {
                let mut b = CMatrix::zeros(self.n, self.l);
                for (j, col) in cols.enumerate() {
                    let mut e = CMatrix::zeros(self.l, self.t);
                    e[(col % self.l, col / self.l)] = c(1.0, 0.0);
                    b.set_column(j, &self.apply(&e)?);
                }
                b
            }
        })
    }

    /// `Å = [vec(A_(1)), …, vec(A_(T))]`, of shape `NL × T`.
    pub fn ring_matrix(&self, guard: usize) -> Result<CMatrix> {
        let rows = self.n * self.l;
        if rows > guard || self.t > guard {
            return Err(HvmpError::Size {
                rows,
                cols: self.t,
                limit: guard,
            });
        }
        let mut ring = CMatrix::zeros(rows, self.t);
        for i in 0..self.t {
            ring.set_column(i, &vec(&self.block(i)?));
        }
        Ok(ring)
    }

    pub fn ring_matrix_default(&self) -> Result<CMatrix> {
        self.ring_matrix(DEFAULT_KRON_GUARD)
    }

    /// The evaluation path the engine uses by default.
    pub fn default_lmmse_path(&self) -> LmmsePath {
        if self.partial_orthogonal || self.column_orthogonal {
            LmmsePath::Orthogonal
        } else if matches!(self.realization, Realization::SvdPrefactored { .. }) {
            LmmsePath::Svd
        } else {
            LmmsePath::Dense
        }
    }

    /// `Aᴴ(ν̄ AAᴴ + σ² I_N)⁻¹ r` as a length-`LT` vector, together with
    /// `tr(Aᴴ(ν̄ AAᴴ + σ² I_N)⁻¹ A)`.
    pub fn regularized_solve(&self, r: &CVector, nu_bar: f64, sigma2: f64, path: LmmsePath) -> Result<(CVector, f64)> {
        if r.len() != self.n {
            return Err(HvmpError::Dimension(format!(
                "residual has length {}, operator has N = {}",
                r.len(),
                self.n
            )));
        }
        match path {
            LmmsePath::Orthogonal => self.solve_orthogonal(r, nu_bar, sigma2),
            LmmsePath::Svd => self.solve_svd(r, nu_bar, sigma2),
            LmmsePath::Dense => self.solve_dense(r, nu_bar, sigma2),
        }
    }

    fn solve_orthogonal(&self, r: &CVector, nu_bar: f64, sigma2: f64) -> Result<(CVector, f64)> {
        // AAᴴ = I gives (ν̄+σ²)⁻¹Aᴴ directly; AᴴA = I gives the same through
        // Aᴴ(ν̄AAᴴ + σ²I) = (ν̄ + σ²)Aᴴ.
        let rank = if self.partial_orthogonal {
            self.n
        } else if self.column_orthogonal {
            self.l * self.t
        } else {
            return Err(HvmpError::Domain(
                "orthogonal LMMSE path requested for a non-orthogonal operator".into(),
            ));
        };
        let denom = nu_bar + sigma2;
        if !(denom > 0.0) {
            return Err(HvmpError::Singular {
                name: "nu_bar·AAᴴ + sigma²·I".into(),
                condition: f64::INFINITY,
            });
        }
        let g = self.adjoint_vec(r).unscale(denom);
        Ok((g, rank as f64 / denom))
    }

    fn solve_svd(&self, r: &CVector, nu_bar: f64, sigma2: f64) -> Result<(CVector, f64)> {
        let owned;
        let (u, s, v_adj) = match &self.realization {
            Realization::SvdPrefactored {
                u,
                singular_values,
                v_adj,
            } => (u, singular_values, v_adj),
            _ => {
                owned = self.svd_prefactor()?;
                return owned.solve_svd(r, nu_bar, sigma2);
            }
        };
        let mut z = u.adjoint() * r;
        let mut trace = 0.0;
        for (zi, &sv) in z.iter_mut().zip(s) {
            let d = nu_bar * sv * sv + sigma2;
            if sv == 0.0 || d <= 0.0 {
                // pseudo-inverse semantics on the null space
                *zi = c(0.0, 0.0);
            } else {
                *zi *= sv / d;
                trace += sv * sv / d;
            }
        }
        Ok((v_adj.adjoint() * z, trace))
    }

    fn solve_dense(&self, r: &CVector, nu_bar: f64, sigma2: f64) -> Result<(CVector, f64)> {
        if let Some(kernel) = self.per_column_kernel() {
            // Block-diagonal: one small system shared by all columns.
            let nc = kernel.nrows();
            let gram = kernel * kernel.adjoint();
            let sys = gram.scale(nu_bar) + CMatrix::identity(nc, nc).scale(sigma2);
            let chol = Cholesky::new(sys).ok_or_else(|| HvmpError::Singular {
                name: "nu_bar·ΦΦᴴ + sigma²·I".into(),
                condition: f64::INFINITY,
            })?;
            let rm = CMatrix::from_column_slice(nc, self.t, r.as_slice());
            let sol = chol.solve(&rm);
            let trace = self.t as f64 * chol.solve(&gram).trace().re;
            return Ok((vec(&(kernel.adjoint() * sol)), trace));
        }
        let a = self.to_dense(usize::MAX)?;
        let gram = &a * a.adjoint();
        let sys = gram.scale(nu_bar) + CMatrix::identity(self.n, self.n).scale(sigma2);
        let chol = Cholesky::new(sys).ok_or_else(|| HvmpError::Singular {
            name: "nu_bar·AAᴴ + sigma²·I".into(),
            condition: f64::INFINITY,
        })?;
        let sol = chol.solve(r);
        let trace = chol.solve(&gram).trace().re;
        Ok((a.adjoint() * sol, trace))
    }
}
