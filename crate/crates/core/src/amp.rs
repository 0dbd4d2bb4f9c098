//! Approximate message passing for whitened linear models
//! `obs = Φ x + e`, `e ~ CN(0, noise_var · I)`, with an i.i.d. elementwise
//! prior on `x`.
//!
//! The iteration is the scalar-variance generalized AMP: the output-side
//! variance `τ_p` is averaged over measurements, the input-side variance is
//! scaled per entry by the squared column norm of `Φ`. For unit-norm columns
//! this is the classic AMP recursion
//!
//! ```text
//! z   = obs − Φ x̂ + z_prev · (K/M)⟨v⟩ / τ_prev
//! r   = x̂ + Φᴴ z,          τ = noise_var + (K/M)⟨v⟩
//! x̂,v = denoise(r, τ)
//! ```
//!
//! All columns of `obs` share `Φ` and are iterated jointly; each column keeps
//! its own `τ_p` and Onsager memory.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HvmpError, Result};
use crate::linalg::{fro_norm_sq, is_finite, CMatrix};
use crate::priors::{Prior, PseudoObservation};

/// Gram matrices closer to diagonal than this skip the iteration.
pub const DIAGONAL_BYPASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmpConfig {
    pub max_iter: usize,
    pub damping: f64,
    pub tol: f64,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig {
            max_iter: 50,
            damping: 0.7,
            tol: 1e-8,
        }
    }
}

impl AmpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(HvmpError::Config("amp.max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(HvmpError::Config(format!(
                "amp.damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(HvmpError::Config("amp.tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AmpProblem {
    pub phi: CMatrix,
    pub obs: CMatrix,
    pub prior: Prior,
    pub noise_var: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmpResult {
    pub mean: CMatrix,
    pub var: DMatrix<f64>,
    pub pseudo_mean: CMatrix,
    pub pseudo_var: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl AmpProblem {
    pub fn new(phi: CMatrix, obs: CMatrix, prior: Prior) -> Result<Self> {
        Self::with_noise(phi, obs, prior, 1.0)
    }

    pub fn with_noise(phi: CMatrix, obs: CMatrix, prior: Prior, noise_var: f64) -> Result<Self> {
        if phi.nrows() != obs.nrows() {
            return Err(HvmpError::Dimension(format!(
                "Φ has {} rows but observations have {}",
                phi.nrows(),
                obs.nrows()
            )));
        }
        if !(noise_var > 0.0) {
            return Err(HvmpError::Domain("AMP noise variance must be positive".into()));
        }
        if !is_finite(&phi) || !is_finite(&obs) {
            return Err(HvmpError::Numeric("non-finite AMP input".into()));
        }
        prior.validate()?;
        Ok(AmpProblem {
            phi,
            obs,
            prior,
            noise_var,
        })
    }
}

fn denoise_all(prior: &Prior, r: &CMatrix, tau_r: &DMatrix<f64>) -> Result<(CMatrix, DMatrix<f64>)> {
    let mut mean = CMatrix::zeros(r.nrows(), r.ncols());
    let mut var = DMatrix::zeros(r.nrows(), r.ncols());
    for j in 0..r.ncols() {
        for i in 0..r.nrows() {
            let (m, v) = prior.denoise(PseudoObservation {
                r: r[(i, j)],
                v: tau_r[(i, j)],
            })?;
            mean[(i, j)] = m;
            var[(i, j)] = v;
        }
    }
    Ok((mean, var))
}

fn diagonal_gram(gram: &CMatrix) -> bool {
    let scale = fro_norm_sq(gram).sqrt();
    let mut off = 0.0;
    for j in 0..gram.ncols() {
        for i in 0..gram.nrows() {
            if i != j {
                off += gram[(i, j)].norm_sqr();
            }
        }
    }
    off.sqrt() <= DIAGONAL_BYPASS_TOL * scale.max(f64::MIN_POSITIVE)
}

pub fn run_amp(p: &AmpProblem, cfg: &AmpConfig) -> Result<AmpResult> {
    cfg.validate()?;
    let (m, k) = p.phi.shape();
    let cols = p.obs.ncols();
    let phi_h = p.phi.adjoint();
    let gram = &phi_h * &p.phi;
    let col_norm: Vec<f64> = (0..k).map(|j| gram[(j, j)].re).collect();
    if col_norm.iter().any(|&n| !(n > 0.0)) {
        return Err(HvmpError::Domain("Φ has a zero column".into()));
    }

    if diagonal_gram(&gram) {
        // Φᴴobs / ‖φ_k‖² is an exact decoupled observation with variance
        // noise / ‖φ_k‖².
        let back = &phi_h * &p.obs;
        let pseudo_mean = CMatrix::from_fn(k, cols, |i, j| back[(i, j)] / col_norm[i]);
        let pseudo_var = DMatrix::from_fn(k, cols, |i, _| p.noise_var / col_norm[i]);
        let (mean, var) = denoise_all(&p.prior, &pseudo_mean, &pseudo_var)?;
        return Ok(AmpResult {
            mean,
            var,
            pseudo_mean,
            pseudo_var,
            iterations: 0,
            converged: true,
        });
    }

    let beta = cfg.damping;
    let mut x_hat = CMatrix::from_element(k, cols, p.prior.mean());
    let mut v = DMatrix::from_element(k, cols, p.prior.variance());
    let mut s_hat = CMatrix::zeros(m, cols);
    let mut r = x_hat.clone();
    let mut tau_r = DMatrix::from_element(k, cols, 1.0);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        // τ_p per column: (1/M) Σ_k ‖φ_k‖² v_k
        let tau_p: Vec<f64> = (0..cols)
            .map(|j| (0..k).map(|i| col_norm[i] * v[(i, j)]).sum::<f64>() / m as f64)
            .collect();
        let mut p_hat = &p.phi * &x_hat;
        for j in 0..cols {
            let tp = Complex64::from(tau_p[j]);
            for i in 0..m {
                p_hat[(i, j)] -= tp * s_hat[(i, j)];
            }
        }
        let mut s_new = &p.obs - &p_hat;
        for (j, tp) in tau_p.iter().enumerate().take(cols) {
            let denom = tp + p.noise_var;
            s_new.column_mut(j).unscale_mut(denom);
        }
        s_hat = if it == 1 {
            s_new
        } else {
            s_new.scale(beta) + s_hat.scale(1.0 - beta)
        };

        let back = &phi_h * &s_hat;
        for j in 0..cols {
            let out = tau_p[j] + p.noise_var;
            for i in 0..k {
                let tr = out / col_norm[i];
                tau_r[(i, j)] = tr;
                r[(i, j)] = x_hat[(i, j)] + back[(i, j)] * tr;
            }
        }
        if !is_finite(&r) || tau_r.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(HvmpError::Divergence {
                iteration: it,
                what: "AMP pseudo-observation".into(),
            });
        }

        let (x_new, v_new) = denoise_all(&p.prior, &r, &tau_r)?;
        let (x_next, v_next) = if it == 1 {
            (x_new, v_new)
        } else {
            (
                x_new.scale(beta) + x_hat.scale(1.0 - beta),
                v_new.scale(beta) + v.scale(1.0 - beta),
            )
        };
        let change = fro_norm_sq(&(&x_next - &x_hat)).sqrt();
        let size = fro_norm_sq(&x_next).sqrt();
        x_hat = x_next;
        v = v_next;
        if !is_finite(&x_hat) {
            return Err(HvmpError::Divergence {
                iteration: it,
                what: "AMP estimate".into(),
            });
        }
        if change <= cfg.tol * size.max(f64::MIN_POSITIVE) || (size == 0.0 && change == 0.0) {
            converged = true;
            break;
        }
    }

    Ok(AmpResult {
        mean: x_hat,
        var: v,
        pseudo_mean: r,
        pseudo_var: tau_r,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, inv_sqrt, HermitianPsd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn identity_phi_is_scalar_denoising() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = random_matrix(6, 3, &mut rng);
        let p = AmpProblem::new(CMatrix::identity(6, 6), obs.clone(), Prior::standard_gaussian()).unwrap();
        let res = run_amp(&p, &AmpConfig::default()).unwrap();
        assert!(res.converged);
        for (m, o) in res.mean.iter().zip(obs.iter()) {
            assert!((m - o * 0.5).norm() < 1e-15);
        }
        assert!(res.var.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn gaussian_prior_matches_joint_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [3, 8, 16] {
            // well-conditioned Hermitian Φ as produced by whitening
            let b = random_matrix(k, k, &mut rng);
            let cov = HermitianPsd::new(&b * b.adjoint() * c(0.2, 0.0) + CMatrix::identity(k, k)).unwrap();
            let phi = inv_sqrt(&cov, "cov").unwrap();
            let obs = random_matrix(k, 4, &mut rng);
            let gamma = 1.5;
            let prior = Prior::gaussian(c(0.0, 0.0), gamma).unwrap();
            let cfg = AmpConfig {
                max_iter: 2000,
                damping: 0.7,
                tol: 1e-12,
            };
            let res = run_amp(&AmpProblem::new(phi.clone(), obs.clone(), prior).unwrap(), &cfg).unwrap();
            // direct linear solve oracle: (γ⁻¹I + ΦᴴΦ)⁻¹ Φᴴ obs
            let sys = CMatrix::identity(k, k).unscale(gamma) + phi.adjoint() * &phi;
            let exact = sys.lu().solve(&(phi.adjoint() * &obs)).unwrap();
            let err = crate::linalg::rel_diff(&res.mean, &exact);
            assert!(err < 1e-5, "k={k} err={err} iters={}", res.iterations);
        }
    }

    #[test]
    fn damping_does_not_move_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 6;
        let b = random_matrix(k, k, &mut rng);
        let cov = HermitianPsd::new(&b * b.adjoint() * c(0.1, 0.0) + CMatrix::identity(k, k)).unwrap();
        let phi = inv_sqrt(&cov, "cov").unwrap();
        let obs = random_matrix(k, 2, &mut rng);
        let prior = Prior::bernoulli_gaussian(0.3, 1.0).unwrap();
        let p = AmpProblem::new(phi, obs, prior).unwrap();
        let a = run_amp(
            &p,
            &AmpConfig {
                max_iter: 3000,
                damping: 1.0,
                tol: 1e-10,
            },
        )
        .unwrap();
        let b = run_amp(
            &p,
            &AmpConfig {
                max_iter: 3000,
                damping: 0.7,
                tol: 1e-10,
            },
        )
        .unwrap();
        assert!(a.converged && b.converged);
        assert!(crate::linalg::rel_diff(&a.mean, &b.mean) < 1e-6);
    }

    #[test]
    fn variance_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = random_matrix(10, 8, &mut rng);
        let obs = random_matrix(10, 3, &mut rng);
        let prior = Prior::bernoulli_gaussian(0.2, 1.0).unwrap();
        let p = AmpProblem::new(phi, obs, prior).unwrap();
        let a = run_amp(&p, &AmpConfig::default()).unwrap();
        let b = run_amp(&p, &AmpConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.var.iter().all(|&v| v >= 0.0 && v <= prior.variance() + 1e-9));
        assert!(a.pseudo_var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn diagonal_phi_bypasses_iteration() {
        let phi = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(2.0, 0.0), c(0.5, 0.0)]));
        let obs = CMatrix::from_column_slice(2, 1, &[c(2.0, 0.0), c(0.25, 0.0)]);
        let prior = Prior::bernoulli_gaussian(0.5, 1.0).unwrap();
        let res = run_amp(&AmpProblem::new(phi, obs, prior).unwrap(), &AmpConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!((res.pseudo_mean[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((res.pseudo_var[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((res.pseudo_var[(1, 0)] - 4.0).abs() < 1e-15);
        let (m, v) = prior.denoise(PseudoObservation { r: c(0.5, 0.0), v: 4.0 }).unwrap();
        assert_eq!((res.mean[(1, 0)], res.var[(1, 0)]), (m, v));
    }

    #[test]
    fn rejects_bad_inputs() {
        let prior = Prior::standard_gaussian();
        assert!(AmpProblem::new(CMatrix::identity(3, 3), CMatrix::zeros(2, 1), prior).is_err());
        let p = AmpProblem::new(CMatrix::identity(2, 2), CMatrix::zeros(2, 1), prior).unwrap();
        let cfg = AmpConfig {
            max_iter: 0,
            ..AmpConfig::default()
        };
        assert!(run_amp(&p, &cfg).is_err());
    }
}
