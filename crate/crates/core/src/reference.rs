//! Exact vector-form messages, Monte-Carlo checks of the quadratic
//! expectation, and a naive alternating baseline. Everything here works on
//! explicit Kronecker products and is meant for small instances only.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{HvmpError, Result};
use crate::hvmp::{lmmse_w, Problem, VarianceMode};
use crate::linalg::{c, kron, sqrt_psd, vec, CMatrix, CVector, HermitianPsd, DEFAULT_KRON_GUARD};
use crate::linops::LinearOperator;
use crate::priors::{standard_complex_normal, Prior};

/// Largest `KT` (or `LK`) the oracles accept.
pub const ORACLE_DIM_LIMIT: usize = 256;

/// `CN(mean, cov)` over a vectorized factor.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMessage {
    pub mean: CVector,
    pub cov: HermitianPsd,
}

fn guard_dim(dim: usize) -> Result<()> {
    if dim > ORACLE_DIM_LIMIT {
        return Err(HvmpError::Size {
            rows: dim,
            cols: dim,
            limit: ORACLE_DIM_LIMIT,
        });
    }
    Ok(())
}

/// `Σ_i A_(i)ᴴ A_(i)`.
fn block_gram(op: &LinearOperator) -> Result<CMatrix> {
    let mut g = CMatrix::zeros(op.l(), op.l());
    for i in 0..op.t() {
        let b = op.block(i)?;
        g += b.adjoint() * b;
    }
    Ok(g)
}

fn solve_message(gram: CMatrix, rhs: CVector, sigma2: f64, name: &str) -> Result<VectorMessage> {
    let precision = HermitianPsd::new(gram)?;
    let cov = precision.inverse_scaled(sigma2, name)?;
    let mean = (cov.matrix() * rhs).unscale(sigma2);
    Ok(VectorMessage { mean, cov })
}

/// Message to `x = vec(X)` with `S ~ CMN(Ŝ, I_L, V_S)` integrated out:
/// `Σ̄_x = σ²(BᴴB + ÅᴴÅ ⊗ V_S)⁻¹`, `x̄ = Σ̄_x Bᴴy/σ²`, `B = A(I_T ⊗ Ŝ)`.
pub fn exact_msg_x(p: &Problem, s_hat: &CMatrix, v_s: &HermitianPsd) -> Result<VectorMessage> {
    let (l, k, t) = (p.l(), p.k, p.t());
    if s_hat.shape() != (l, k) || v_s.dim() != k {
        return Err(HvmpError::Dimension("exact_msg_x: Ŝ must be L×K, V_S K×K".into()));
    }
    guard_dim(k * t)?;
    let a = p.op.to_dense(DEFAULT_KRON_GUARD)?;
    let b = &a * kron(&CMatrix::identity(t, t), s_hat, DEFAULT_KRON_GUARD)?;
    let ring = p.op.ring_matrix_default()?;
    let gram = b.adjoint() * &b + kron(&(ring.adjoint() * &ring), v_s.matrix(), DEFAULT_KRON_GUARD)?;
    solve_message(gram, b.adjoint() * &p.y, p.noise_var, "Sigma_x")
}

/// Message to `s = vec(S)` with `X ~ CMN(X̂, U_X, I_T)` integrated out:
/// `Σ̄_s = σ²(CᴴC + U_Xᵀ ⊗ Σ_i A_(i)ᴴA_(i))⁻¹`, `C = A(X̂ᵀ ⊗ I_L)`.
///
/// The transpose is immaterial for the diagonal `U_X` the engine produces.
pub fn exact_msg_s(p: &Problem, x_hat: &CMatrix, u_x: &HermitianPsd) -> Result<VectorMessage> {
    let (l, k, t) = (p.l(), p.k, p.t());
    if x_hat.shape() != (k, t) || u_x.dim() != k {
        return Err(HvmpError::Dimension("exact_msg_s: X̂ must be K×T, U_X K×K".into()));
    }
    guard_dim(l * k)?;
    let a = p.op.to_dense(DEFAULT_KRON_GUARD)?;
    let cm = &a * kron(&x_hat.transpose(), &CMatrix::identity(l, l), DEFAULT_KRON_GUARD)?;
    let g = block_gram(&p.op)?;
    let gram = cm.adjoint() * &cm + kron(&u_x.matrix().transpose(), &g, DEFAULT_KRON_GUARD)?;
    solve_message(gram, cm.adjoint() * &p.y, p.noise_var, "Sigma_s")
}

/// Posterior mean of `CN(msg) · Π CN(mean, variance)`.
pub fn gaussian_belief(msg: &VectorMessage, mean: Complex64, variance: f64) -> Result<CVector> {
    let n = msg.mean.len();
    let precision = msg.cov.inverse_scaled(1.0, "message covariance")?;
    let post = HermitianPsd::new(precision.matrix() + CMatrix::identity(n, n).unscale(variance))?
        .inverse_scaled(1.0, "posterior covariance")?;
    let rhs = precision.matrix() * &msg.mean + CVector::from_element(n, mean / variance);
    Ok(post.matrix() * rhs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCheck {
    pub mc: f64,
    pub closed_form: f64,
    pub stderr: f64,
}

impl McCheck {
    /// `|mc − closed| ≤ k·stderr`, with a roundoff allowance when the
    /// sampled quantity is deterministic.
    pub fn within(&self, k: f64) -> bool {
        (self.mc - self.closed_form).abs() <= k * self.stderr + 1e-10 * self.closed_form.abs().max(1.0)
    }
}

/// Compares `E_S ‖A vec(SX)‖²` for `S ~ CMN(Ŝ, I_L, V_S)` with
/// `xᴴ(BᴴB + ÅᴴÅ ⊗ V_S)x`.
pub fn mc_quadratic_check<R: Rng + ?Sized>(
    s_hat: &CMatrix,
    v_s: &HermitianPsd,
    x: &CMatrix,
    op: &LinearOperator,
    samples: usize,
    rng: &mut R,
) -> Result<McCheck> {
    let (l, k) = s_hat.shape();
    let t = x.ncols();
    if l != op.l() || t != op.t() || x.nrows() != k || v_s.dim() != k || samples < 2 {
        return Err(HvmpError::Dimension("mc_quadratic_check: inconsistent inputs".into()));
    }
    let a = op.to_dense(DEFAULT_KRON_GUARD)?;
    let b = &a * kron(&CMatrix::identity(t, t), s_hat, DEFAULT_KRON_GUARD)?;
    let ring = op.ring_matrix_default()?;
    let quad = b.adjoint() * &b + kron(&(ring.adjoint() * &ring), v_s.matrix(), DEFAULT_KRON_GUARD)?;
    let xv = vec(x);
    let closed_form = xv.dotc(&(quad * &xv)).re;

    let root = sqrt_psd(v_s)?;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut z = CMatrix::zeros(l, k);
    for n in 1..=samples {
        for e in z.iter_mut() {
            *e = standard_complex_normal(rng);
        }
        let s = s_hat + &z * &root;
        let q = op.apply(&(s * x))?.norm_squared();
        let delta = q - mean;
        mean += delta / n as f64;
        m2 += delta * (q - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok(McCheck {
        mc: mean,
        closed_form,
        stderr: (var / samples as f64).sqrt(),
    })
}

/// Largest pairwise relative difference between `A vec(SX)`,
/// `A(Xᵀ ⊗ I_L) vec(S)` and `A(I_T ⊗ S) vec(X)`.
pub fn vec_identity_check(s: &CMatrix, x: &CMatrix, op: &LinearOperator) -> Result<f64> {
    let (l, _) = s.shape();
    let t = x.ncols();
    let a = op.to_dense(DEFAULT_KRON_GUARD)?;
    let forms = [
        op.apply(&(s * x))?,
        &a * (kron(&x.transpose(), &CMatrix::identity(l, l), DEFAULT_KRON_GUARD)? * vec(s)),
        &a * (kron(&CMatrix::identity(t, t), s, DEFAULT_KRON_GUARD)? * vec(x)),
    ];
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            let scale = forms[i].norm().max(forms[j].norm());
            if scale > 0.0 {
                worst = worst.max((&forms[i] - &forms[j]).norm() / scale);
            }
        }
    }
    Ok(worst)
}

fn second_moment(prior: &Prior) -> f64 {
    prior.variance() + prior.mean().norm_sqr()
}

fn sparsity(prior: &Prior) -> f64 {
    match *prior {
        Prior::BernoulliGaussian { rho, .. } => rho,
        Prior::Gaussian { .. } => 1.0,
    }
}

/// Shrinks every entry towards zero by the magnitude of the largest entry
/// that does not make the top `keep`.
fn soft_threshold_top(m: &mut CMatrix, keep: usize) {
    let n = m.len();
    if keep >= n {
        return;
    }
    let mut mags: Vec<f64> = m.iter().map(|z| z.norm()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let tau = mags[keep];
    for z in m.iter_mut() {
        let a = z.norm();
        *z = if a > tau { *z * ((a - tau) / a) } else { c(0.0, 0.0) };
    }
}

fn ridge_left(w: &CMatrix, s: &CMatrix, lambda: f64) -> Result<CMatrix> {
    // argmin_X ‖W − SX‖² + λ‖X‖²
    let k = s.ncols();
    let g = s.adjoint() * s + CMatrix::identity(k, k).scale(lambda);
    let rhs = s.adjoint() * w;
    g.cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or_else(|| HvmpError::Singular {
            name: "baseline Gram".into(),
            condition: f64::INFINITY,
        })
}

/// Alternating ridge regressions on a single LMMSE estimate `Ŵ` of `SX`,
/// with `S` soft-thresholded to the prior sparsity after every update.
/// `λ` defaults to `ν_w` over the prior second moment of each factor.
pub fn als_baseline<R: Rng + ?Sized>(p: &Problem, t_max: usize, rng: &mut R) -> Result<(CMatrix, CMatrix)> {
    als_baseline_with(p, t_max, None, rng)
}

pub fn als_baseline_with<R: Rng + ?Sized>(
    p: &Problem,
    t_max: usize,
    lambda: Option<f64>,
    rng: &mut R,
) -> Result<(CMatrix, CMatrix)> {
    let (l, k, t) = (p.l(), p.k, p.t());
    let energy = k as f64 * second_moment(&p.prior_s) * second_moment(&p.prior_x);
    let (w_hat, nu_w) = lmmse_w(p, &CMatrix::zeros(l, t), energy, VarianceMode::Posterior, None)?;
    let (lam_x, lam_s) = match lambda {
        Some(v) => (v, v),
        None => (nu_w / second_moment(&p.prior_x), nu_w / second_moment(&p.prior_s)),
    };
    let keep = (sparsity(&p.prior_s) * (l * k) as f64).ceil() as usize;
    let mut s = p.prior_s.sample_matrix(l, k, rng);
    let mut x = CMatrix::zeros(k, t);
    for _ in 0..t_max {
        x = ridge_left(&w_hat, &s, lam_x)?;
        // S update as the transposed problem: Wᴴ ≈ Xᴴ Sᴴ
        s = ridge_left(&w_hat.adjoint(), &x.adjoint(), lam_s)?.adjoint();
        soft_threshold_top(&mut s, keep);
    }
    Ok((s, x))
}

/// Composite Simpson rule for `∫ aᵖ exp(−a²/γ − (b − a)²/v) da`, p = 0, 1, 2.
fn gaussian_product_moments(b: f64, gamma: f64, v: f64) -> [f64; 3] {
    let half = b.abs() + 12.0 * gamma.max(v).sqrt();
    let n = 20_000usize;
    let h = 2.0 * half / n as f64;
    let mut acc = [0.0; 3];
    for i in 0..=n {
        let a = -half + h * i as f64;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = (-a * a / gamma - (b - a) * (b - a) / v).exp() * w;
        acc[0] += f;
        acc[1] += a * f;
        acc[2] += a * a * f;
    }
    acc.map(|s| s * h / 3.0)
}

/// Posterior mean and variance of `x ~ (1−ρ)δ + ρ CN(0, γ)` given
/// `r = x + CN(0, v)`, by numerical integration. The complex integrals
/// factor into real and imaginary parts.
pub fn bg_moments_quadrature(rho: f64, gamma: f64, r: Complex64, v: f64) -> (Complex64, f64) {
    let re = gaussian_product_moments(r.re, gamma, v);
    let im = gaussian_product_moments(r.im, gamma, v);
    let pi = std::f64::consts::PI;
    let slab = rho / (pi * pi * gamma * v);
    let evidence = (1.0 - rho) * (-r.norm_sqr() / v).exp() / (pi * v) + slab * re[0] * im[0];
    let mean = c(re[1] * im[0], re[0] * im[1]) * (slab / evidence);
    let second = (re[2] * im[0] + re[0] * im[2]) * slab / evidence;
    (mean, second - mean.norm_sqr())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::rel_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| standard_complex_normal(rng))
    }

    fn problem(op: LinearOperator, k: usize, rng: &mut impl Rng) -> (Problem, CMatrix, CMatrix) {
        let s = random(op.l(), k, rng);
        let x = random(k, op.t(), rng);
        let y = op.apply(&(&s * &x)).unwrap();
        let p = Problem::new(op, y, 0.1, Prior::standard_gaussian(), Prior::standard_gaussian(), k).unwrap();
        (p, s, x)
    }

    #[test]
    fn single_column_reduces_to_plain_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(6, 4, &mut rng);
        let op = LinearOperator::dense(a.clone(), 4, 1).unwrap();
        let (p, s, _) = problem(op, 2, &mut rng);
        let msg = exact_msg_x(&p, &s, &HermitianPsd::scaled_identity(2, 0.0).unwrap()).unwrap();
        let b = &a * &s;
        let want_cov = (b.adjoint() * &b).try_inverse().unwrap().scale(p.noise_var);
        assert!(rel_diff(msg.cov.matrix(), &want_cov) < 1e-9);
        let want_mean = &want_cov * (b.adjoint() * &p.y) / c(p.noise_var, 0.0);
        assert!((&msg.mean - want_mean).norm() < 1e-9 * msg.mean.norm());
    }

    #[test]
    fn orthonormal_s_identity_operator() {
        // A = I, V_S = 0, ŜᴴŜ = I  ⇒  Σ̄_x = σ² I
        let (l, k, t) = (3, 2, 2);
        let op = LinearOperator::dense(CMatrix::identity(l * t, l * t), l, t).unwrap();
        let mut s = CMatrix::zeros(l, k);
        s[(0, 0)] = c(1.0, 0.0);
        s[(2, 1)] = c(0.0, 1.0);
        let y = CVector::from_element(l * t, c(1.0, 0.0));
        let p = Problem::new(op, y, 0.3, Prior::standard_gaussian(), Prior::standard_gaussian(), k).unwrap();
        let msg = exact_msg_x(&p, &s, &HermitianPsd::scaled_identity(k, 0.0).unwrap()).unwrap();
        assert!(rel_diff(msg.cov.matrix(), &CMatrix::identity(k * t, k * t).scale(0.3)) < 1e-12);
    }

    #[test]
    fn exact_s_without_uncertainty_is_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = LinearOperator::partial_dft(10, 3, 4, &mut rng).unwrap();
        let (p, _, x) = problem(op, 2, &mut rng);
        let msg = exact_msg_s(&p, &x, &HermitianPsd::scaled_identity(2, 0.0).unwrap()).unwrap();
        let a = p.op.to_dense(4096).unwrap();
        let cm = &a * x.transpose().kronecker(&CMatrix::identity(3, 3));
        let want = (cm.adjoint() * &cm).try_inverse().unwrap().scale(p.noise_var);
        assert!(rel_diff(msg.cov.matrix(), &want) < 1e-8);
    }

    #[test]
    fn exact_s_scalar_row() {
        // L = 1: the block Gram is Σ_i |a_i|²
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(5, 3, &mut rng);
        let op = LinearOperator::dense(a.clone(), 1, 3).unwrap();
        let (p, _, x) = problem(op, 2, &mut rng);
        let u = HermitianPsd::from_diagonal(&[0.2, 0.5]).unwrap();
        let msg = exact_msg_s(&p, &x, &u).unwrap();
        let g: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        let cm = &a * x.transpose();
        let want = (cm.adjoint() * &cm + u.matrix().scale(g))
            .try_inverse()
            .unwrap()
            .scale(p.noise_var);
        assert!(rel_diff(msg.cov.matrix(), &want) < 1e-9);
    }

    #[test]
    fn exact_messages_are_hermitian_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = LinearOperator::partial_dft(20, 4, 5, &mut rng).unwrap();
        let (p, s, x) = problem(op, 3, &mut rng);
        let v = HermitianPsd::from_diagonal(&[0.1, 0.2, 0.3]).unwrap();
        for msg in [exact_msg_x(&p, &s, &v).unwrap(), exact_msg_s(&p, &x, &v).unwrap()] {
            let m = msg.cov.matrix();
            assert!(rel_diff(m, &m.adjoint()) < 1e-9);
            assert!(msg.cov.eigenvalues().unwrap()[0] > 0.0);
        }
    }

    #[test]
    fn oracle_scale_guard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let op = LinearOperator::partial_dft(40, 2, 30, &mut rng).unwrap();
        let (p, s, _) = problem(op, 9, &mut rng);
        let err = exact_msg_x(&p, &s, &HermitianPsd::identity(9)).unwrap_err();
        assert!(matches!(err.root(), HvmpError::Size { .. }));
    }

    #[test]
    fn mc_without_variance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = LinearOperator::partial_dft(8, 3, 2, &mut rng).unwrap();
        let s = random(3, 2, &mut rng);
        let x = random(2, 2, &mut rng);
        let v0 = HermitianPsd::scaled_identity(2, 0.0).unwrap();
        let chk = mc_quadratic_check(&s, &v0, &x, &op, 10, &mut rng).unwrap();
        assert_eq!(chk.stderr, 0.0);
        assert!((chk.mc - chk.closed_form).abs() <= 1e-12 * chk.closed_form);
    }

    #[test]
    fn mc_scalar_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let op = LinearOperator::dense(CMatrix::identity(1, 1), 1, 1).unwrap();
        let s = CMatrix::from_element(1, 1, c(0.5, -1.0));
        let x = CMatrix::from_element(1, 1, c(2.0, 1.0));
        let v = HermitianPsd::from_diagonal(&[0.3]).unwrap();
        let chk = mc_quadratic_check(&s, &v, &x, &op, 100_000, &mut rng).unwrap();
        let want = (1.25 + 0.3) * 5.0;
        assert!((chk.closed_form - want).abs() < 1e-12);
        assert!(chk.within(4.0), "{chk:?}");
    }

    #[test]
    fn vec_identity_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random(4, 3, &mut rng);
        let x = random(3, 5, &mut rng);
        let dense = LinearOperator::dense(CMatrix::identity(20, 20), 4, 5).unwrap();
        let dft = LinearOperator::partial_dft(12, 4, 5, &mut rng).unwrap();
        for op in [dense, dft] {
            assert!(vec_identity_check(&s, &x, &op).unwrap() <= 1e-12);
        }
        let dft = LinearOperator::partial_dft(12, 4, 5, &mut rng).unwrap();
        assert_eq!(vec_identity_check(&s, &CMatrix::zeros(3, 5), &dft).unwrap(), 0.0);
    }

    #[test]
    fn quadrature_matches_closed_form_denoiser() {
        for &(rho, r, v) in &[
            (0.2, c(0.4, -0.3), 0.1),
            (0.7, c(-2.0, 1.0), 1.5),
            (0.05, c(0.0, 0.0), 0.3),
        ] {
            let (m, var) = bg_moments_quadrature(rho, 1.0, r, v);
            let (m2, var2) = Prior::bernoulli_gaussian(rho, 1.0)
                .unwrap()
                .denoise(crate::priors::PseudoObservation::new(r, v).unwrap())
                .unwrap();
            assert!((m - m2).norm() < 1e-8 && (var - var2).abs() < 1e-8);
        }
    }

    #[test]
    fn baseline_rank_one_matches_leading_singular_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (l, t) = (6, 5);
        let op = LinearOperator::dense(CMatrix::identity(l * t, l * t), l, t).unwrap();
        let s = random(l, 1, &mut rng);
        let x = random(1, t, &mut rng);
        let w = &s * &x;
        let p = Problem::new(
            op,
            vec(&w),
            1e-10,
            Prior::standard_gaussian(),
            Prior::standard_gaussian(),
            1,
        )
        .unwrap();
        let (sh, xh) = als_baseline(&p, 30, &mut rng).unwrap();
        let svd = w.clone().svd(true, true);
        let u = svd.u.unwrap().column(0).into_owned();
        let cos = sh.column(0).dotc(&u).norm() / sh.column(0).norm();
        assert!((cos - 1.0).abs() < 1e-9, "cos {cos}");
        assert!(rel_diff(&(&sh * &xh), &w) < 1e-6);
    }

    #[test]
    fn baseline_heavy_ridge_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let op = LinearOperator::partial_dft(20, 4, 5, &mut rng).unwrap();
        let (p, _, _) = problem(op, 2, &mut rng);
        let (s, x) = als_baseline_with(&p, 5, Some(1e12), &mut rng).unwrap();
        assert!((&s * &x).norm() < 1e-8);
    }
}
