//! NMSE in dB, after resolving the ambiguities of the bilinear model.
//!
//! `SX = (S D P)(Pᵀ D⁻¹ X)` for any invertible diagonal `D` and permutation
//! `P`, so an estimate of `X` is only defined up to row scaling and row
//! reordering (columns for `S`).

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{HvmpError, Result};
use crate::linalg::{fro_norm_sq, CMatrix};

/// Lower clamp on reported NMSE.
pub const NMSE_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AmbiguityMode {
    None,
    /// Per-row least-squares scale, rows matched in place.
    RowScale,
    /// Per-column least-squares scale, columns matched in place.
    ColScale,
    /// Per-row scale after the best one-to-one row assignment.
    PermRowScale,
    /// Per-column scale after the best one-to-one column assignment.
    PermColScale,
}

impl AmbiguityMode {
    pub const ALL: [AmbiguityMode; 5] = [
        AmbiguityMode::None,
        AmbiguityMode::RowScale,
        AmbiguityMode::ColScale,
        AmbiguityMode::PermRowScale,
        AmbiguityMode::PermColScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AmbiguityMode::None => "none",
            AmbiguityMode::RowScale => "row-scale",
            AmbiguityMode::ColScale => "col-scale",
            AmbiguityMode::PermRowScale => "perm-row-scale",
            AmbiguityMode::PermColScale => "perm-col-scale",
        }
    }
}

impl fmt::Display for AmbiguityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AmbiguityMode {
    type Err = HvmpError;
    fn from_str(s: &str) -> Result<Self> {
        AmbiguityMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| HvmpError::Config(format!("unknown ambiguity mode `{s}`")))
    }
}

fn to_db(err: f64, energy: f64) -> f64 {
    if err <= 0.0 {
        return NMSE_FLOOR_DB;
    }
    (10.0 * (err / energy).log10()).max(NMSE_FLOOR_DB)
}

/// `⟨e, t⟩ / ‖e‖²`, or 0 for a zero estimate.
fn ls_scale<'a, I>(est: I, truth: I) -> Complex64
where
    I: Iterator<Item = &'a Complex64>,
{
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = 0.0;
    for (e, t) in est.zip(truth) {
        num += e.conj() * t;
        den += e.norm_sqr();
    }
    if den > 0.0 {
        num / den
    } else {
        Complex64::new(0.0, 0.0)
    }
}

fn scaled_error(est: &[Complex64], truth: &[Complex64]) -> f64 {
    let c = ls_scale(est.iter(), truth.iter());
    est.iter().zip(truth).map(|(e, t)| (t - e * c).norm_sqr()).sum()
}

/// Columns of `m` as owned vectors (rows of `mᵀ` for the row modes).
fn lines(m: &CMatrix, rows: bool) -> Vec<Vec<Complex64>> {
    if rows {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    } else {
        (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect()
    }
}

/// Best assignment of estimate lines to truth lines; returns the total
/// scaled error.
fn matched_error(est: &[Vec<Complex64>], truth: &[Vec<Complex64>]) -> f64 {
    let k = truth.len();
    // explained energy |⟨e_j, t_i⟩|² / ‖e_j‖², maximized over assignments
    let mut gain = vec![vec![0.0f64; k]; k];
    let mut top = 0.0f64;
    for (i, t) in truth.iter().enumerate() {
        for (j, e) in est.iter().enumerate() {
            let energy: f64 = t.iter().map(|z| z.norm_sqr()).sum();
            let g = energy - scaled_error(e, t);
            gain[i][j] = g.max(0.0);
            top = top.max(gain[i][j]);
        }
    }
    let assignment: Vec<usize> = if top > 0.0 {
        // integer weights keep the solver exact; 2⁴⁰ levels is far below
        // the resolution that matters for a dB figure
        let scale = (1u64 << 40) as f64 / top;
        let weights = Matrix::from_rows(
            gain.iter()
                .map(|row| row.iter().map(|g| (g * scale).round() as i64).collect::<Vec<_>>()),
        )
        .expect("square gain matrix");
        kuhn_munkres(&weights).1
    } else {
        (0..k).collect()
    };
    truth
        .iter()
        .zip(assignment)
        .map(|(t, j)| scaled_error(&est[j], t))
        .sum()
}

/// NMSE of `estimate` against `truth` in dB, clamped below at −120 dB.
pub fn nmse_db(estimate: &CMatrix, truth: &CMatrix, mode: AmbiguityMode) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(HvmpError::Dimension(format!(
            "estimate is {:?} but truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let energy = fro_norm_sq(truth);
    if !(energy > 0.0) {
        return Err(HvmpError::Domain("NMSE of a zero truth is undefined".into()));
    }
    let err = match mode {
        AmbiguityMode::None => fro_norm_sq(&(estimate - truth)),
        AmbiguityMode::RowScale | AmbiguityMode::ColScale => {
            let rows = mode == AmbiguityMode::RowScale;
            lines(estimate, rows)
                .iter()
                .zip(lines(truth, rows).iter())
                .map(|(e, t)| scaled_error(e, t))
                .sum()
        }
        AmbiguityMode::PermRowScale | AmbiguityMode::PermColScale => {
            let rows = mode == AmbiguityMode::PermRowScale;
            matched_error(&lines(estimate, rows), &lines(truth, rows))
        }
    };
    Ok(to_db(err, energy))
}
