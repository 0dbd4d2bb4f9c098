//! Oracle suites behind `hvmp verify`: every check compares a fast path
//! against an independent evaluation and reports the worst deviation.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amp::AmpConfig;
use crate::error::Result;
use crate::harness::metrics::{nmse_db, AmbiguityMode};
use crate::hvmp::{
    column_posterior_with, lmmse_w, run, step, EngineConfig, InvSqrtFn, PosteriorPath, Problem, VarianceMode,
};
use crate::linalg::{c, inv_sqrt, unvec, vec, CMatrix, CVector, HermitianPsd};
use crate::linops::{LinearOperator, LmmsePath};
use crate::priors::{standard_complex_normal, Prior, PseudoObservation};
use crate::reference::{
    bg_moments_quadrature, exact_msg_s, exact_msg_x, gaussian_belief, mc_quadratic_check, vec_identity_check,
};

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub instances: usize,
    pub mc_samples: usize,
    pub whiten: InvSqrtFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 20_240_601,
            instances: 20,
            mc_samples: 100_000,
            whiten: inv_sqrt,
        }
    }
}

/// Outcome of one suite: the worst observed value against its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: usize,
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<22} {:>6} {:>12} {:>12}  result",
            "suite", "checks", "worst", "limit"
        );
        for s in &self.suites {
            let _ = writeln!(
                out,
                "{:<22} {:>6} {:>12.3e} {:>12.3e}  {}{}",
                s.name,
                s.checks,
                s.worst,
                s.threshold,
                if s.passed { "PASS" } else { "FAIL" },
                if s.note.is_empty() {
                    String::new()
                } else {
                    format!("  ({})", s.note)
                }
            );
        }
        out
    }
}

/// Folds per-check values into a report; any error or NaN fails the suite.
fn suite(name: &'static str, threshold: f64, values: Vec<Result<f64>>) -> SuiteReport {
    let checks = values.len();
    let mut worst = 0.0f64;
    let mut note = String::new();
    for v in values {
        match v {
            Ok(x) if x.is_finite() => worst = worst.max(x),
            Ok(x) => {
                worst = f64::INFINITY;
                note = format!("non-finite value {x}");
            }
            Err(e) => {
                worst = f64::INFINITY;
                note = e.to_string();
            }
        }
    }
    SuiteReport {
        name,
        checks,
        worst,
        threshold,
        passed: worst <= threshold,
        note,
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| standard_complex_normal(rng))
}

fn dense_gaussian(n: usize, l: usize, t: usize, rng: &mut impl Rng) -> Result<LinearOperator> {
    let scale = 1.0 / (n as f64).sqrt();
    LinearOperator::dense(random(n, l * t, rng).scale(scale), l, t)
}

/// Hermitian positive definite matrix with eigenvalues log-uniform in
/// `[1, cond]`.
pub fn random_covariance(k: usize, cond: f64, rng: &mut impl Rng) -> Result<HermitianPsd> {
    let q = random(k, k, rng).qr().q();
    let d = CMatrix::from_diagonal(&CVector::from_fn(k, |_, _| c(cond.powf(rng.random::<f64>()), 0.0)));
    HermitianPsd::new(&q * d * q.adjoint())
}

/// `max ‖A vec(SX) − A(Xᵀ⊗I)s‖` and friends over dense and DFT operators.
pub fn vec_identity_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x01);
    let values = (0..opts.instances)
        .map(|i| {
            let (l, k, t) = (2 + i % 4, 1 + i % 3, 2 + i % 5);
            let op = match i % 3 {
                0 => dense_gaussian(l * t + i % 3, l, t, &mut rng)?,
                1 => LinearOperator::partial_dft(l * t - 1, l, t, &mut rng)?,
                _ => LinearOperator::partial_dft_per_column(l + 1, l, t, &mut rng)?,
            };
            vec_identity_check(&random(l, k, &mut rng), &random(k, t, &mut rng), &op)
        })
        .collect();
    suite("vec identity", 1e-12, values)
}

/// Monte-Carlo deviation of the quadratic form in standard errors.
pub fn mc_quadratic_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x02);
    let values = (0..opts.instances)
        .map(|i| {
            let (l, k, t) = (3, 2, 4);
            let op = if i % 2 == 0 {
                dense_gaussian(l * t, l, t, &mut rng)?
            } else {
                LinearOperator::partial_dft(8, l, t, &mut rng)?
            };
            let b = random(k, k, &mut rng);
            let v_s = HermitianPsd::new((&b * b.adjoint()).scale(0.3))?;
            let check = mc_quadratic_check(
                &random(l, k, &mut rng),
                &v_s,
                &random(k, t, &mut rng),
                &op,
                opts.mc_samples,
                &mut rng,
            )?;
            Ok(if check.stderr > 0.0 {
                (check.mc - check.closed_form).abs() / check.stderr
            } else if check.within(4.0) {
                0.0
            } else {
                f64::INFINITY
            })
        })
        .collect();
    suite("mc quadratic (sigma)", 4.0, values)
}

/// `‖W Σ Wᴴ − I‖_F` for the whitening matrix under test.
pub fn whitening_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x03);
    let values = (0..opts.instances)
        .map(|i| {
            let cov = random_covariance(2 + i % 7, 1e4, &mut rng)?;
            let w = (opts.whiten)(&cov, "verify")?;
            let k = cov.dim();
            Ok((&w * cov.matrix() * w.adjoint() - CMatrix::identity(k, k)).norm())
        })
        .collect();
    suite("whitening", 1e-9, values)
}

/// `ŵ` and `ν_w` from `Aᴴ(ν̄AAᴴ + σ²I)⁻¹` formed explicitly.
fn direct_lmmse(a: &CMatrix, y: &CVector, w_bar: &CVector, nu_bar: f64, sigma2: f64) -> Option<(CVector, f64)> {
    let n = a.nrows();
    let inv = ((a * a.adjoint()).scale(nu_bar) + CMatrix::identity(n, n).scale(sigma2)).try_inverse()?;
    let w = w_bar + (a.adjoint() * &inv * (y - a * w_bar)).scale(nu_bar);
    let reduction = (a.adjoint() * inv * a).trace().re * nu_bar * nu_bar / a.ncols() as f64;
    Some((w, reduction))
}

/// Relative deviation of every LMMSE path from the explicit formula.
pub fn lmmse_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x04);
    let mut values = Vec::new();
    for i in 0..opts.instances {
        let mut one = || -> Result<Vec<f64>> {
            let (l, t) = (2 + i % 5, 3 + i % 7);
            let n = 8 + (i * 5) % 40;
            let op = match i % 3 {
                0 => LinearOperator::partial_dft(n.min(l * t), l, t, &mut rng)?,
                1 => LinearOperator::partial_dft_per_column(l + i % 3, l, t, &mut rng)?,
                _ => dense_gaussian(n.min(64), l, t, &mut rng)?,
            };
            let a = op.to_dense(usize::MAX)?;
            let y = CVector::from_fn(op.n(), |_, _| standard_complex_normal(&mut rng));
            let sigma2 = 0.01 + rng.random::<f64>();
            let nu_bar = 0.1 + rng.random::<f64>();
            let w_bar = random(l, t, &mut rng);
            let Some((w_direct, reduction)) = direct_lmmse(&a, &y, &vec(&w_bar), nu_bar, sigma2) else {
                return Ok(vec![f64::INFINITY]);
            };
            let prior = Prior::standard_gaussian();
            let mut paths = vec![(op.clone(), LmmsePath::Dense), (op.svd_prefactor()?, LmmsePath::Svd)];
            if op.default_lmmse_path() == LmmsePath::Orthogonal {
                paths.push((op.clone(), LmmsePath::Orthogonal));
            }
            let mut out = Vec::new();
            for (o, path) in paths {
                let p = Problem::new(o, y.clone(), sigma2, prior, prior, 1)?;
                for (mode, nu_want) in [
                    (VarianceMode::Posterior, nu_bar - reduction),
                    (VarianceMode::Literal, reduction),
                ] {
                    let (w, nu) = lmmse_w(&p, &w_bar, nu_bar, mode, Some(path))?;
                    out.push((vec(&w) - &w_direct).norm() / w_direct.norm());
                    out.push((nu - nu_want).abs() / nu_want.abs().max(f64::MIN_POSITIVE));
                }
            }
            Ok(out)
        };
        match one() {
            Ok(v) => values.extend(v.into_iter().map(Ok)),
            Err(e) => values.push(Err(e)),
        }
    }
    suite("lmmse paths", 1e-9, values)
}

/// Grid of `(ρ, r, v)` points for the denoiser oracle.
pub fn denoiser_grid() -> Vec<(f64, Complex64, f64)> {
    let pairs = [
        (c(0.0, 0.0), 0.1),
        (c(0.5, -0.2), 0.5),
        (c(1.5, 1.0), 0.2),
        (c(-2.0, 0.3), 1.0),
        (c(0.1, 3.0), 2.0),
    ];
    let mut grid = Vec::new();
    for rho in [0.1, 0.3, 0.6, 0.9] {
        for (r, v) in pairs {
            grid.push((rho, r, v));
        }
    }
    grid
}

/// Absolute deviation of the closed-form denoiser from quadrature.
pub fn denoiser_suite(_opts: &VerifyOptions) -> SuiteReport {
    let gamma = 1.0;
    let values = denoiser_grid()
        .into_iter()
        .map(|(rho, r, v)| {
            let prior = Prior::bernoulli_gaussian(rho, gamma)?;
            let (m, var) = prior.denoise(PseudoObservation::new(r, v)?)?;
            let (mq, varq) = bg_moments_quadrature(rho, gamma, r, v);
            Ok((m - mq).norm().max((var - varq).abs()))
        })
        .collect();
    suite("denoiser quadrature", 1e-6, values)
}

/// Closed-form Gaussian belief against whitening followed by AMP.
pub fn gaussian_consistency_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x05);
    let closed = EngineConfig::default();
    let whitened = EngineConfig {
        posterior_path: PosteriorPath::Whitened,
        amp: AmpConfig {
            max_iter: 500,
            damping: 0.7,
            tol: 1e-12,
        },
        ..EngineConfig::default()
    };
    let prior = Prior::standard_gaussian();
    let values = (0..10)
        .map(|i| {
            let k = 3 + i % 6;
            let cov = random_covariance(k, 100.0, &mut rng)?;
            let mean = random(k, 6, &mut rng);
            let (a, _) = column_posterior_with(&mean, &cov, &prior, &closed, "Sigma_X", opts.whiten)?;
            let (b, _) = column_posterior_with(&mean, &cov, &prior, &whitened, "Sigma_X", opts.whiten)?;
            Ok((&a - &b).norm() / a.norm())
        })
        .collect();
    suite("gaussian consistency", 1e-4, values)
}

/// NMSE gap (dB) between the matrix-form belief of `X` and the belief
/// from the exact vector-form message, Gaussian priors, tiny instances.
pub fn exact_message_suite(opts: &VerifyOptions) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x06);
    let cfg = EngineConfig::default();
    let g = Prior::standard_gaussian();
    let values = (0..opts.instances.min(10))
        .map(|i| {
            let (l, k, t) = (6, 2, 8);
            let op = if i % 2 == 0 {
                dense_gaussian(l * t, l, t, &mut rng)?
            } else {
                LinearOperator::partial_dft_per_column(8, l, t, &mut rng)?
            };
            let s = g.sample_matrix(l, k, &mut rng);
            let x = g.sample_matrix(k, t, &mut rng);
            let clean = op.apply(&(&s * &x))?;
            let sigma2 = clean.norm_squared() / (op.n() as f64 * 100.0);
            let y = &clean + CVector::from_fn(op.n(), |_, _| standard_complex_normal(&mut rng) * sigma2.sqrt());
            let p = Problem::new(op, y, sigma2, g, g, k)?;
            let out = run(&p, &cfg, 20, &mut rng, None, |_| false)?;
            if let Some(e) = out.error {
                return Err(e);
            }
            let next = step(&out.state, &p, &cfg)?;
            let matrix = nmse_db(&next.x_hat, &x, AmbiguityMode::PermRowScale)?;
            let msg = exact_msg_x(&p, &out.state.s_hat, &out.state.v_s)?;
            let x_exact = unvec(&gaussian_belief(&msg, c(0.0, 0.0), 1.0)?, k, t)?;
            let exact = nmse_db(&x_exact, &x, AmbiguityMode::PermRowScale)?;
            // the S-side message must also be a valid Gaussian
            let ms = exact_msg_s(&p, &out.state.x_hat, &out.state.u_x)?;
            if !ms.cov.eigenvalues()?.iter().all(|&e| e >= 0.0) {
                return Ok(f64::INFINITY);
            }
            Ok((matrix - exact).abs())
        })
        .collect();
    suite("exact vs matrix (dB)", 3.0, values)
}

pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        suites: vec![
            vec_identity_suite(opts),
            mc_quadratic_suite(opts),
            whitening_suite(opts),
            lmmse_suite(opts),
            denoiser_suite(opts),
            gaussian_consistency_suite(opts),
            exact_message_suite(opts),
        ],
    }
}
