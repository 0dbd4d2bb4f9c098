//! Elementwise priors and their scalar MMSE denoisers.
//!
//! All Gaussians are circular: `CN(m, c)` has density
//! `exp(−|x − m|²/c) / (πc)` and `E|x − m|² = c`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{HvmpError, Result};
use crate::linalg::{c, CMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// `(1 − ρ) δ(x) + ρ CN(x; 0, variance)`.
    BernoulliGaussian { rho: f64, variance: f64 },
    /// `CN(x; mean, variance)`.
    Gaussian { mean: Complex64, variance: f64 },
}

/// A scalar observation `r = x + CN(0, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoObservation {
    pub r: Complex64,
    pub v: f64,
}

impl PseudoObservation {
    pub fn new(r: Complex64, v: f64) -> Result<Self> {
        if !(v > 0.0 && v.is_finite()) {
            return Err(HvmpError::Domain(format!(
                "pseudo-observation variance must be positive and finite, got {v}"
            )));
        }
        Ok(PseudoObservation { r, v })
    }
}

/// Draws `CN(0, 1)`.
pub fn standard_complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

impl Prior {
    pub fn bernoulli_gaussian(rho: f64, variance: f64) -> Result<Self> {
        let p = Prior::BernoulliGaussian { rho, variance };
        p.validate()?;
        Ok(p)
    }

    pub fn gaussian(mean: Complex64, variance: f64) -> Result<Self> {
        let p = Prior::Gaussian { mean, variance };
        p.validate()?;
        Ok(p)
    }

    pub fn standard_gaussian() -> Self {
        Prior::Gaussian {
            mean: c(0.0, 0.0),
            variance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::BernoulliGaussian { rho, variance } => {
                if !(0.0..=1.0).contains(&rho) {
                    return Err(HvmpError::Domain(format!("rho must lie in [0, 1], got {rho}")));
                }
                if !(variance > 0.0 && variance.is_finite()) {
                    return Err(HvmpError::Domain(format!(
                        "prior variance must be positive, got {variance}"
                    )));
                }
            }
            Prior::Gaussian { mean, variance } => {
                if !(mean.re.is_finite() && mean.im.is_finite()) {
                    return Err(HvmpError::Domain("prior mean must be finite".into()));
                }
                if !(variance > 0.0 && variance.is_finite()) {
                    return Err(HvmpError::Domain(format!(
                        "prior variance must be positive, got {variance}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Prior::Gaussian { .. })
    }

    pub fn mean(&self) -> Complex64 {
        match *self {
            Prior::BernoulliGaussian { .. } => c(0.0, 0.0),
            Prior::Gaussian { mean, .. } => mean,
        }
    }

    /// `E|x|² − |E x|²`.
    pub fn variance(&self) -> f64 {
        match *self {
            Prior::BernoulliGaussian { rho, variance } => rho * variance,
            Prior::Gaussian { variance, .. } => variance,
        }
    }

    /// Prior of `conj(x)`.
    pub fn conj(&self) -> Prior {
        match *self {
            Prior::Gaussian { mean, variance } => Prior::Gaussian {
                mean: mean.conj(),
                variance,
            },
            bg => bg,
        }
    }

    /// Posterior probability that a Bernoulli-Gaussian entry is active.
    /// Always 1 for a Gaussian prior.
    pub fn activity(&self, obs: PseudoObservation) -> f64 {
        match *self {
            Prior::Gaussian { .. } => 1.0,
            Prior::BernoulliGaussian { rho, variance } => {
                if rho <= 0.0 {
                    return 0.0;
                }
                if rho >= 1.0 {
                    return 1.0;
                }
                let v = obs.v;
                let r2 = obs.r.norm_sqr();
                // log of (1−ρ) g(r; 0, v) / (ρ g(r; 0, γ+v))
                let log_ratio = ((1.0 - rho) / rho).ln() + ((variance + v) / v).ln() - r2 / v + r2 / (variance + v);
                if log_ratio > 700.0 {
                    0.0
                } else {
                    1.0 / (1.0 + log_ratio.exp())
                }
            }
        }
    }

    /// Posterior mean and variance of `x` given `r = x + CN(0, v)`.
    pub fn denoise(&self, obs: PseudoObservation) -> Result<(Complex64, f64)> {
        if !(obs.v > 0.0) {
            return Err(HvmpError::Domain(format!(
                "denoiser noise variance must be positive, got {}",
                obs.v
            )));
        }
        let PseudoObservation { r, v } = obs;
        Ok(match *self {
            Prior::Gaussian { mean, variance } => {
                let gain = variance / (variance + v);
                (mean + (r - mean) * gain, variance * v / (variance + v))
            }
            Prior::BernoulliGaussian { variance, .. } => {
                let pi = self.activity(obs);
                let gain = variance / (variance + v);
                let slab_mean = r * gain;
                let slab_var = variance * v / (variance + v);
                let m = slab_mean * pi;
                let var = pi * (slab_mean.norm_sqr() + slab_var) - m.norm_sqr();
                (m, var.max(0.0))
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Complex64 {
        match *self {
            Prior::Gaussian { mean, variance } => mean + standard_complex_normal(rng) * variance.sqrt(),
            Prior::BernoulliGaussian { rho, variance } => {
                // draw the slab unconditionally so the stream layout does not
                // depend on ρ
                let active = rng.random::<f64>() < rho;
                let slab = standard_complex_normal(rng) * variance.sqrt();
                if active {
                    slab
                } else {
                    c(0.0, 0.0)
                }
            }
        }
    }

    /// Matrix with i.i.d. entries drawn column by column.
    pub fn sample_matrix<R: Rng + ?Sized>(&self, rows: usize, cols: usize, rng: &mut R) -> CMatrix {
        let mut m = CMatrix::zeros(rows, cols);
        for z in m.iter_mut() {
            *z = self.sample(rng);
        }
        m
    }
}
