//! The GBF-HVMP engine.
//!
//! One iteration updates, in order:
//!
//! 1. the auxiliary LMMSE estimate `ŵ, ν_w` of `w = vec(SX)` around the prior
//!    moments `w̄ = vec(ŜX̂)`, `ν̄_w = 2σ²N/‖A‖_F²`;
//! 2. the matrix-form message `CMN(X̄, Σ̄_X, I_T)` from the likelihood to `X`;
//! 3. the belief `CMN(X̂, U_X, I_T)`;
//! 4. the message `CMN(S̄, I_L, Σ̄_S)` to `S`;
//! 5. the belief `CMN(Ŝ, I_L, V_S)`.
//!
//! Beliefs are computed in closed form for Gaussian priors. Otherwise the
//! message is whitened with `Σ̄^{-1/2}` and decoupled into scalar
//! pseudo-observations by AMP. `U_X` and `V_S` are kept diagonal: the
//! per-entry posterior variances are averaged along rows of `X` and columns
//! of `S`.
//!
//! Every transition is a pure function of `(state, problem, config)`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::amp::{run_amp, AmpConfig, AmpProblem};
use crate::error::{HvmpError, Result};
use crate::linalg::{fro_norm_sq, inv_sqrt, unvec, vec, CMatrix, CVector, HermitianPsd, MatrixGaussian};
use crate::linops::{LinearOperator, LmmsePath};
use crate::priors::Prior;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `ν_w = ν̄_w − (1/LT) tr(ν̄_w² Aᴴ(ν̄_w AAᴴ + σ²I)⁻¹A)`.
    #[default]
    Posterior,
    /// `ν_w = (1/LT) tr(ν̄_w² Aᴴ(ν̄_w AAᴴ + σ²I)⁻¹A)`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorPath {
    /// Closed form for Gaussian priors, whitening + AMP otherwise.
    #[default]
    Auto,
    /// Always whiten and run AMP.
    Whitened,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub variance_mode: VarianceMode,
    pub posterior_path: PosteriorPath,
    pub amp: AmpConfig,
    /// Weight of the new belief means; 1 disables damping.
    pub damping: f64,
    /// Forces an LMMSE evaluation path; `None` lets the operator choose.
    #[serde(skip)]
    pub lmmse_path: Option<LmmsePath>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            variance_mode: VarianceMode::Posterior,
            posterior_path: PosteriorPath::Auto,
            amp: AmpConfig::default(),
            damping: 1.0,
            lmmse_path: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.amp.validate()?;
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(HvmpError::Config(format!(
                "engine.damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// A measurement `y = A(SX) + n` with known noise power and priors.
#[derive(Debug, Clone)]
pub struct Problem {
    pub op: LinearOperator,
    pub y: CVector,
    pub noise_var: f64,
    pub prior_s: Prior,
    pub prior_x: Prior,
    pub k: usize,
}

impl Problem {
    pub fn new(
        op: LinearOperator,
        y: CVector,
        noise_var: f64,
        prior_s: Prior,
        prior_x: Prior,
        k: usize,
    ) -> Result<Self> {
        if y.len() != op.n() {
            return Err(HvmpError::Dimension(format!(
                "y has length {} but the operator has N = {}",
                y.len(),
                op.n()
            )));
        }
        if k == 0 {
            return Err(HvmpError::Dimension("K must be at least 1".into()));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(HvmpError::Domain(format!(
                "noise variance must be positive, got {noise_var}"
            )));
        }
        prior_s.validate()?;
        prior_x.validate()?;
        Ok(Problem {
            op,
            y,
            noise_var,
            prior_s,
            prior_x,
            k,
        })
    }

    pub fn l(&self) -> usize {
        self.op.l()
    }
    pub fn t(&self) -> usize {
        self.op.t()
    }
    pub fn n(&self) -> usize {
        self.op.n()
    }

    /// `‖y − A vec(SX)‖₂`.
    pub fn residual_norm(&self, s: &CMatrix, x: &CMatrix) -> Result<f64> {
        Ok((&self.y - self.op.apply(&(s * x))?).norm())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HvmpState {
    pub s_hat: CMatrix,
    pub x_hat: CMatrix,
    pub v_s: HermitianPsd,
    pub u_x: HermitianPsd,
    pub w_hat: CMatrix,
    pub nu_w: f64,
    pub w_bar: CMatrix,
    pub nu_bar_w: f64,
    /// `CMN(X̄, Σ̄_X, I_T)`.
    pub msg_x: MatrixGaussian,
    /// `CMN(S̄, I_L, Σ̄_S)`.
    pub msg_s: MatrixGaussian,
    pub iteration: usize,
}

impl HvmpState {
    /// Checks the structural invariants of a state.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.v_s.dim();
        if self.u_x.dim() != k || !(self.nu_w > 0.0) || !(self.nu_bar_w > 0.0) {
            return Err(HvmpError::Numeric("state invariant violated".into()));
        }
        if !self.v_s.is_diagonal(0.0) || !self.u_x.is_diagonal(0.0) {
            return Err(HvmpError::Numeric("V_S and U_X must be diagonal".into()));
        }
        for m in [&self.s_hat, &self.x_hat, &self.w_hat, &self.w_bar] {
            if !crate::linalg::is_finite(m) {
                return Err(HvmpError::Numeric("non-finite state entry".into()));
            }
        }
        Ok(())
    }
}

/// Initial state: `Ŝ`, `X̂` drawn from the priors, prior variances on the
/// diagonals of `V_S` and `U_X`.
pub fn init<R: Rng + ?Sized>(p: &Problem, rng: &mut R) -> Result<HvmpState> {
    let (l, k, t) = (p.l(), p.k, p.t());
    let s_hat = p.prior_s.sample_matrix(l, k, rng);
    let x_hat = p.prior_x.sample_matrix(k, t, rng);
    let v_s = HermitianPsd::scaled_identity(k, p.prior_s.variance())?;
    let u_x = HermitianPsd::scaled_identity(k, p.prior_x.variance())?;
    let mut state = HvmpState {
        msg_x: MatrixGaussian::column_form(x_hat.clone(), u_x.clone())?,
        msg_s: MatrixGaussian::row_form(s_hat.clone(), v_s.clone())?,
        s_hat,
        x_hat,
        v_s,
        u_x,
        w_hat: CMatrix::zeros(l, t),
        nu_w: 1.0,
        w_bar: CMatrix::zeros(l, t),
        nu_bar_w: 1.0,
        iteration: 0,
    };
    let (w_bar, nu_bar_w) = prior_w_moments(&state, p);
    state.w_hat = w_bar.clone();
    state.w_bar = w_bar;
    state.nu_w = nu_bar_w;
    state.nu_bar_w = nu_bar_w;
    Ok(state)
}

/// `w̄ = ŜX̂` (as an `L × T` matrix) and `ν̄_w = 2σ²N/‖A‖_F²`.
pub fn prior_w_moments(state: &HvmpState, p: &Problem) -> (CMatrix, f64) {
    let w_bar = &state.s_hat * &state.x_hat;
    let nu_bar = 2.0 * p.noise_var * p.n() as f64 / p.op.fro_norm_sq();
    (w_bar, nu_bar)
}

/// LMMSE estimate of `w` from `y = Aw + n` with prior `CN(w̄, ν̄ I)`.
pub fn lmmse_w(
    p: &Problem,
    w_bar: &CMatrix,
    nu_bar: f64,
    mode: VarianceMode,
    path: Option<LmmsePath>,
) -> Result<(CMatrix, f64)> {
    if !(nu_bar > 0.0) {
        return Err(HvmpError::Domain(format!("ν̄_w must be positive, got {nu_bar}")));
    }
    let path = path.unwrap_or_else(|| p.op.default_lmmse_path());
    let resid = &p.y - p.op.apply(w_bar)?;
    let (gain, trace) = p.op.regularized_solve(&resid, nu_bar, p.noise_var, path)?;
    let lt = (p.l() * p.t()) as f64;
    let w_hat = w_bar + unvec(&gain, p.l(), p.t())?.scale(nu_bar);
    let reduction = nu_bar * nu_bar * trace / lt;
    let nu_w = match mode {
        VarianceMode::Posterior => nu_bar - reduction,
        VarianceMode::Literal => reduction,
    };
    // keep ν_w strictly positive in the noiseless limit
    Ok((w_hat, nu_w.max(1e-12 * nu_bar).max(f64::MIN_POSITIVE)))
}

/// `Σ̄ = ν_w (M)⁻¹` for `M = gram + scale · D`, via a floored Hermitian PSD.
fn scaled_inverse(gram: CMatrix, nu_w: f64, name: &str) -> Result<HermitianPsd> {
    let m = HermitianPsd::new(gram)?;
    m.inverse_scaled(nu_w, name)
}

/// `Σ̄_X = ν_w(ŜᴴŜ + L·V_S)⁻¹`, `X̄ = Σ̄_X Ŝᴴ Ŵ / ν_w`.
pub fn msg_fy_to_x(state: &HvmpState, p: &Problem) -> Result<(CMatrix, HermitianPsd)> {
    if !(state.nu_w > 0.0) {
        return Err(HvmpError::Domain("ν_w must be positive".into()));
    }
    let l = p.l() as f64;
    let s_h = state.s_hat.adjoint();
    let gram = &s_h * &state.s_hat + state.v_s.matrix().scale(l);
    let sigma = scaled_inverse(gram, state.nu_w, "Sigma_X")?;
    let x_bar = (sigma.matrix() * (s_h * &state.w_hat)).unscale(state.nu_w);
    Ok((x_bar, sigma))
}

/// `Σ̄_S = ν_w(X̂X̂ᴴ + T·U_X)⁻¹`, `S̄ = Ŵ X̂ᴴ Σ̄_S / ν_w`.
pub fn msg_fy_to_s(state: &HvmpState, p: &Problem) -> Result<(CMatrix, HermitianPsd)> {
    if !(state.nu_w > 0.0) {
        return Err(HvmpError::Domain("ν_w must be positive".into()));
    }
    let t = p.t() as f64;
    let x_h = state.x_hat.adjoint();
    let gram = &state.x_hat * &x_h + state.u_x.matrix().scale(t);
    let sigma = scaled_inverse(gram, state.nu_w, "Sigma_S")?;
    let s_bar = (&state.w_hat * x_h * sigma.matrix()).unscale(state.nu_w);
    Ok((s_bar, sigma))
}

/// Signature of the whitening routine, replaceable for mutation testing.
pub type InvSqrtFn = fn(&HermitianPsd, &str) -> Result<CMatrix>;

/// Belief of a matrix variable whose columns are independent given the
/// message `CMN(mean, cov, I)` and an i.i.d. prior. Returns the posterior
/// mean and the per-entry posterior variances.
pub fn column_posterior(
    mean: &CMatrix,
    cov: &HermitianPsd,
    prior: &Prior,
    cfg: &EngineConfig,
    name: &str,
) -> Result<(CMatrix, DMatrix<f64>)> {
    column_posterior_with(mean, cov, prior, cfg, name, inv_sqrt)
}

pub fn column_posterior_with(
    mean: &CMatrix,
    cov: &HermitianPsd,
    prior: &Prior,
    cfg: &EngineConfig,
    name: &str,
    whiten: InvSqrtFn,
) -> Result<(CMatrix, DMatrix<f64>)> {
    match (prior, cfg.posterior_path) {
        (Prior::Gaussian { mean: mu, variance }, PosteriorPath::Auto) => {
            // the product of two Gaussians: C = (Σ̄⁻¹ + γ⁻¹I)⁻¹
            let k = cov.dim();
            let precision = cov.inverse_scaled(1.0, name)?;
            let post = HermitianPsd::new(precision.matrix() + CMatrix::identity(k, k).unscale(*variance))?
                .inverse_scaled(1.0, name)?;
            let mut rhs = precision.matrix() * mean;
            let shift = *mu / *variance;
            rhs.iter_mut().for_each(|z| *z += shift);
            let x = post.matrix() * rhs;
            let d = post.diagonal();
            let var = DMatrix::from_fn(k, mean.ncols(), |i, _| d[i].max(0.0));
            Ok((x, var))
        }
        _ => {
            let phi = whiten(cov, name)?;
            let obs = &phi * mean;
            let res = run_amp(&AmpProblem::new(phi, obs, *prior)?, &cfg.amp)?;
            Ok((res.mean, res.var))
        }
    }
}

fn row_average(var: &DMatrix<f64>) -> Vec<f64> {
    let cols = var.ncols() as f64;
    (0..var.nrows())
        .map(|i| var.row(i).iter().sum::<f64>() / cols)
        .collect()
}

/// `X̂` and `U_X = Diag((1/T) Σ_t ν_{x_kt})`.
pub fn msg_x_posterior(state: &HvmpState, p: &Problem, cfg: &EngineConfig) -> Result<(CMatrix, HermitianPsd)> {
    let cov = state
        .msg_x
        .covariance()
        .ok_or_else(|| HvmpError::Domain("message to X has no covariance".into()))?;
    let (x_hat, var) = column_posterior(&state.msg_x.mean, cov, &p.prior_x, cfg, "Sigma_X")?;
    Ok((x_hat, HermitianPsd::from_diagonal(&row_average(&var))?))
}

/// `Ŝ` and `V_S = Diag((1/L) Σ_l ν_{s_lk})`, computed on the whitened
/// transpose `Σ̄_S^{-1/2} S̄ᴴ = Σ̄_S^{-1/2} Sᴴ + E_S`.
pub fn msg_s_posterior(state: &HvmpState, p: &Problem, cfg: &EngineConfig) -> Result<(CMatrix, HermitianPsd)> {
    let cov = state
        .msg_s
        .covariance()
        .ok_or_else(|| HvmpError::Domain("message to S has no covariance".into()))?;
    let s_bar_h = state.msg_s.mean.adjoint();
    let (s_h, var) = column_posterior(&s_bar_h, cov, &p.prior_s.conj(), cfg, "Sigma_S")?;
    Ok((s_h.adjoint(), HermitianPsd::from_diagonal(&row_average(&var))?))
}

fn blend(new: CMatrix, old: &CMatrix, beta: f64) -> CMatrix {
    if beta >= 1.0 {
        new
    } else {
        new.scale(beta) + old.scale(1.0 - beta)
    }
}

fn blend_diag(new: HermitianPsd, old: &HermitianPsd, beta: f64) -> Result<HermitianPsd> {
    if beta >= 1.0 {
        return Ok(new);
    }
    let d: Vec<f64> = new
        .diagonal()
        .iter()
        .zip(old.diagonal())
        .map(|(a, b)| beta * a + (1.0 - beta) * b)
        .collect();
    HermitianPsd::from_diagonal(&d)
}

/// One pass of the five updates. The input state is not modified.
pub fn step(state: &HvmpState, p: &Problem, cfg: &EngineConfig) -> Result<HvmpState> {
    let mut next = state.clone();

    let (w_bar, nu_bar) = prior_w_moments(&next, p);
    let (w_hat, nu_w) =
        lmmse_w(p, &w_bar, nu_bar, cfg.variance_mode, cfg.lmmse_path).map_err(|e| e.in_step("LMMSE update of w"))?;
    next.w_bar = w_bar;
    next.nu_bar_w = nu_bar;
    next.w_hat = w_hat;
    next.nu_w = nu_w;

    let (x_bar, sigma_x) = msg_fy_to_x(&next, p).map_err(|e| e.in_step("message to X"))?;
    next.msg_x = MatrixGaussian::column_form(x_bar, sigma_x)?;

    let (x_hat, u_x) = msg_x_posterior(&next, p, cfg).map_err(|e| e.in_step("belief of X"))?;
    next.x_hat = blend(x_hat, &state.x_hat, cfg.damping);
    next.u_x = blend_diag(u_x, &state.u_x, cfg.damping)?;

    let (s_bar, sigma_s) = msg_fy_to_s(&next, p).map_err(|e| e.in_step("message to S"))?;
    next.msg_s = MatrixGaussian::row_form(s_bar, sigma_s)?;

    let (s_hat, v_s) = msg_s_posterior(&next, p, cfg).map_err(|e| e.in_step("belief of S"))?;
    next.s_hat = blend(s_hat, &state.s_hat, cfg.damping);
    next.v_s = blend_diag(v_s, &state.v_s, cfg.damping)?;

    next.iteration += 1;
    if cfg!(debug_assertions) {
        next.check_invariants()?;
    }
    Ok(next)
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub nu_w: f64,
    pub mean_u_x: f64,
    pub mean_v_s: f64,
    /// `‖X̂_t − X̂_{t−1}‖_F / ‖X̂_t‖_F`.
    pub x_change: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub state: HvmpState,
    pub trajectory: Vec<IterationRecord>,
    /// The stop rule (relative change or observer) fired before `t_max`.
    pub stopped_early: bool,
    pub error: Option<HvmpError>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub rel_tol: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Initializes and iterates until `t_max`, the relative-change stop rule, or
/// the observer returning `true`.
pub fn run<R, F>(
    p: &Problem,
    cfg: &EngineConfig,
    t_max: usize,
    rng: &mut R,
    stop: Option<StopRule>,
    mut observer: F,
) -> Result<RunOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(&HvmpState) -> bool,
{
    if t_max == 0 {
        return Err(HvmpError::Config("t_max must be at least 1".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut state = init(p, rng)?;
    let mut trajectory = Vec::with_capacity(t_max);
    for _ in 0..t_max {
        let next = match step(&state, p, cfg) {
            Ok(s) => s,
            Err(e) => {
                return Ok(RunOutcome {
                    state,
                    trajectory,
                    stopped_early: false,
                    error: Some(e),
                })
            }
        };
        let x_norm = fro_norm_sq(&next.x_hat).sqrt();
        let x_change = fro_norm_sq(&(&next.x_hat - &state.x_hat)).sqrt() / x_norm.max(f64::MIN_POSITIVE);
        let residual = p.residual_norm(&next.s_hat, &next.x_hat)?;
        trajectory.push(IterationRecord {
            iteration: next.iteration,
            residual,
            nu_w: next.nu_w,
            mean_u_x: mean(&next.u_x.diagonal()),
            mean_v_s: mean(&next.v_s.diagonal()),
            x_change,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        state = next;
        if observer(&state) {
            return Ok(RunOutcome {
                state,
                trajectory,
                stopped_early: true,
                error: None,
            });
        }
        if let Some(rule) = stop {
            if x_change < rule.rel_tol {
                return Ok(RunOutcome {
                    state,
                    trajectory,
                    stopped_early: true,
                    error: None,
                });
            }
        }
    }
    Ok(RunOutcome {
        state,
        trajectory,
        stopped_early: false,
        error: None,
    })
}

/// `vec(ŜX̂)` residual helper used by tests and the harness.
pub fn product_vec(state: &HvmpState) -> CVector {
    vec(&(&state.s_hat * &state.x_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, rel_diff};
    use crate::priors::{standard_complex_normal, PseudoObservation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| standard_complex_normal(rng))
    }

    fn bg() -> Prior {
        Prior::bernoulli_gaussian(0.2, 1.0).unwrap()
    }

    fn identity_problem(l: usize, k: usize, t: usize, sigma2: f64, rng: &mut impl Rng) -> (Problem, CMatrix, CMatrix) {
        let op = LinearOperator::dense(CMatrix::identity(l * t, l * t), l, t).unwrap();
        let s = bg().sample_matrix(l, k, rng);
        let x = Prior::standard_gaussian().sample_matrix(k, t, rng);
        let y = vec(&(&s * &x));
        let p = Problem::new(op, y, sigma2, bg(), Prior::standard_gaussian(), k).unwrap();
        (p, s, x)
    }

    fn state_with(p: &Problem, rng: &mut impl Rng) -> HvmpState {
        let mut st = init(p, rng).unwrap();
        st.w_hat = random(p.l(), p.t(), rng);
        st
    }

    #[test]
    fn init_uses_prior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, _, _) = identity_problem(6, 3, 4, 0.1, &mut rng);
        let st = init(&p, &mut rng).unwrap();
        assert_eq!(st.v_s.diagonal(), vec![0.2; 3]);
        assert_eq!(st.u_x.diagonal(), vec![1.0; 3]);
        assert_eq!(st.w_bar, &st.s_hat * &st.x_hat);
        st.check_invariants().unwrap();
        let a = init(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = init(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prior_w_moments_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = LinearOperator::partial_dft(12, 4, 6, &mut rng).unwrap();
        let y = CVector::zeros(12);
        let p = Problem::new(op, y, 0.3, bg(), Prior::standard_gaussian(), 2).unwrap();
        let mut st = init(&p, &mut rng).unwrap();
        let (w_bar, nu_bar) = prior_w_moments(&st, &p);
        assert!((nu_bar - 0.6).abs() < 1e-12);
        assert!(rel_diff(&w_bar, &(&st.s_hat * &st.x_hat)) < 1e-15);
        st.s_hat.fill(c(0.0, 0.0));
        assert_eq!(prior_w_moments(&st, &p).0, CMatrix::zeros(4, 6));
    }

    #[test]
    fn lmmse_perfect_observation_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, _, _) = identity_problem(3, 2, 4, 1e-12, &mut rng);
        let w_bar = random(3, 4, &mut rng);
        let (w, nu) = lmmse_w(&p, &w_bar, 1.0, VarianceMode::Posterior, None).unwrap();
        assert!((vec(&w) - &p.y).norm() < 1e-9 * p.y.norm());
        assert!(nu < 1e-9);
        let (_, nu) = lmmse_w(&p, &w_bar, 1.0, VarianceMode::Literal, None).unwrap();
        assert!((nu - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lmmse_partial_orthogonal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, l, t) = (10, 4, 5);
        let op = LinearOperator::partial_dft(n, l, t, &mut rng).unwrap();
        let y = CVector::from_fn(n, |_, _| standard_complex_normal(&mut rng));
        let p = Problem::new(op, y, 0.2, bg(), Prior::standard_gaussian(), 2).unwrap();
        let nu_bar = 0.7;
        let (_, nu) = lmmse_w(&p, &CMatrix::zeros(l, t), nu_bar, VarianceMode::Posterior, None).unwrap();
        let want = nu_bar * (1.0 - (n as f64 / (l * t) as f64) * nu_bar / (nu_bar + 0.2));
        assert!((nu - want).abs() < 1e-12);
    }

    #[test]
    fn lmmse_dense_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, l, t) = (8, 2, 3);
        let a = random(n, l * t, &mut rng);
        let op = LinearOperator::dense(a.clone(), l, t).unwrap();
        let y = CVector::from_fn(n, |_, _| standard_complex_normal(&mut rng));
        let p = Problem::new(op, y.clone(), 0.4, bg(), Prior::standard_gaussian(), 2).unwrap();
        let w_bar = random(l, t, &mut rng);
        let nu_bar = 1.3;
        let m = (a.clone() * a.adjoint()).scale(nu_bar) + CMatrix::identity(n, n).scale(0.4);
        let inv = m.try_inverse().unwrap();
        let w_want = vec(&w_bar) + (a.adjoint() * &inv * (&y - &a * vec(&w_bar))).scale(nu_bar);
        let tr = (a.adjoint() * &inv * &a).trace().re * nu_bar * nu_bar / (l * t) as f64;
        for (mode, nu_want) in [(VarianceMode::Posterior, nu_bar - tr), (VarianceMode::Literal, tr)] {
            let (w, nu) = lmmse_w(&p, &w_bar, nu_bar, mode, None).unwrap();
            assert!((vec(&w) - &w_want).norm() < 1e-10 * w_want.norm());
            assert!((nu - nu_want).abs() < 1e-10 * nu_want);
        }
        assert!(lmmse_w(&p, &w_bar, 0.0, VarianceMode::Posterior, None).is_err());
    }

    #[test]
    fn msg_to_x_identity_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (p, _, _) = identity_problem(3, 3, 4, 0.1, &mut rng);
        let mut st = state_with(&p, &mut rng);
        st.s_hat = CMatrix::identity(3, 3);
        st.v_s = HermitianPsd::scaled_identity(3, 0.0).unwrap();
        st.nu_w = 1.0;
        let (x_bar, sigma) = msg_fy_to_x(&st, &p).unwrap();
        assert!(rel_diff(sigma.matrix(), &CMatrix::identity(3, 3)) < 1e-14);
        assert!(rel_diff(&x_bar, &st.w_hat) < 1e-14);
    }

    #[test]
    fn msg_to_x_without_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (p, _, _) = identity_problem(5, 2, 4, 0.1, &mut rng);
        let mut st = state_with(&p, &mut rng);
        st.s_hat.fill(c(0.0, 0.0));
        st.v_s = HermitianPsd::scaled_identity(2, 0.4).unwrap();
        st.nu_w = 0.3;
        let (x_bar, sigma) = msg_fy_to_x(&st, &p).unwrap();
        assert!(rel_diff(sigma.matrix(), &CMatrix::identity(2, 2).scale(0.3 / (5.0 * 0.4))) < 1e-14);
        assert_eq!(x_bar, CMatrix::zeros(2, 4));
    }

    #[test]
    fn matrix_messages_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, _, _) = identity_problem(6, 3, 5, 0.1, &mut rng);
        let mut st = state_with(&p, &mut rng);
        st.s_hat = random(6, 3, &mut rng);
        st.x_hat = random(3, 5, &mut rng);
        st.v_s = HermitianPsd::from_diagonal(&[0.1, 0.2, 0.3]).unwrap();
        st.u_x = HermitianPsd::from_diagonal(&[0.3, 0.05, 0.2]).unwrap();
        st.nu_w = 0.25;

        let gx = st.s_hat.adjoint() * &st.s_hat + st.v_s.matrix().scale(6.0);
        let sx = gx.try_inverse().unwrap().scale(0.25);
        let (x_bar, sigma_x) = msg_fy_to_x(&st, &p).unwrap();
        assert!(rel_diff(sigma_x.matrix(), &sx) < 1e-12);
        assert!(rel_diff(&x_bar, &(&sx * st.s_hat.adjoint() * &st.w_hat).unscale(0.25)) < 1e-12);

        let gs = &st.x_hat * st.x_hat.adjoint() + st.u_x.matrix().scale(5.0);
        let ss = gs.try_inverse().unwrap().scale(0.25);
        let (s_bar, sigma_s) = msg_fy_to_s(&st, &p).unwrap();
        assert!(rel_diff(sigma_s.matrix(), &ss) < 1e-12);
        assert!(rel_diff(&s_bar, &(&st.w_hat * st.x_hat.adjoint() * &ss).unscale(0.25)) < 1e-12);
    }

    #[test]
    fn zero_variances_give_least_squares_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, _, _) = identity_problem(6, 2, 5, 0.1, &mut rng);
        let mut st = state_with(&p, &mut rng);
        st.s_hat = random(6, 2, &mut rng);
        st.x_hat = random(2, 5, &mut rng);
        st.v_s = HermitianPsd::scaled_identity(2, 0.0).unwrap();
        st.u_x = HermitianPsd::scaled_identity(2, 0.0).unwrap();
        st.nu_w = 0.5;
        let (_, sx) = msg_fy_to_x(&st, &p).unwrap();
        let want = (st.s_hat.adjoint() * &st.s_hat).try_inverse().unwrap().scale(0.5);
        assert!(rel_diff(sx.matrix(), &want) < 1e-12);
        let (_, ss) = msg_fy_to_s(&st, &p).unwrap();
        let want = (&st.x_hat * st.x_hat.adjoint()).try_inverse().unwrap().scale(0.5);
        assert!(rel_diff(ss.matrix(), &want) < 1e-12);
    }

    #[test]
    fn msg_to_s_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (k, t) = (2, 4);
        let (p, _, _) = identity_problem(3, k, t, 0.1, &mut rng);
        let mut st = state_with(&p, &mut rng);
        // rows of X̂ orthogonal with norm² T
        st.x_hat = CMatrix::from_fn(k, t, |i, j| {
            if (j + i) % 2 == 0 {
                c(2.0_f64.sqrt(), 0.0)
            } else {
                c(0.0, 0.0)
            }
        });
        st.u_x = HermitianPsd::scaled_identity(k, 0.0).unwrap();
        st.nu_w = t as f64;
        let (s_bar, sigma) = msg_fy_to_s(&st, &p).unwrap();
        assert!(rel_diff(sigma.matrix(), &CMatrix::identity(k, k)) < 1e-14);
        assert!(rel_diff(&s_bar, &(&st.w_hat * st.x_hat.adjoint()).unscale(t as f64)) < 1e-14);

        st.x_hat.fill(c(0.0, 0.0));
        st.u_x = HermitianPsd::scaled_identity(k, 0.5).unwrap();
        let (s_bar, sigma) = msg_fy_to_s(&st, &p).unwrap();
        assert!(
            rel_diff(
                sigma.matrix(),
                &CMatrix::identity(k, k).scale(t as f64 / (t as f64 * 0.5))
            ) < 1e-14
        );
        assert_eq!(s_bar, CMatrix::zeros(3, k));
    }

    fn with_messages(st: &mut HvmpState, x_bar: CMatrix, sx: HermitianPsd, s_bar: CMatrix, ss: HermitianPsd) {
        st.msg_x = MatrixGaussian::column_form(x_bar, sx).unwrap();
        st.msg_s = MatrixGaussian::row_form(s_bar, ss).unwrap();
    }

    #[test]
    fn gaussian_posteriors_halve_unit_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut p, _, _) = identity_problem(4, 3, 5, 0.1, &mut rng);
        p.prior_s = Prior::standard_gaussian();
        let mut st = init(&p, &mut rng).unwrap();
        let x_bar = random(3, 5, &mut rng);
        let s_bar = random(4, 3, &mut rng);
        with_messages(
            &mut st,
            x_bar.clone(),
            HermitianPsd::identity(3),
            s_bar.clone(),
            HermitianPsd::identity(3),
        );
        let cfg = EngineConfig::default();
        let (x, ux) = msg_x_posterior(&st, &p, &cfg).unwrap();
        assert!(rel_diff(&x, &x_bar.scale(0.5)) < 1e-14);
        assert_eq!(ux.diagonal(), vec![0.5; 3]);
        let (s, vs) = msg_s_posterior(&st, &p, &cfg).unwrap();
        assert!(rel_diff(&s, &s_bar.scale(0.5)) < 1e-14);
        for d in vs.diagonal() {
            assert!((d - 0.5).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_messages_denoise_entrywise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (mut p, _, _) = identity_problem(4, 3, 5, 0.1, &mut rng);
        p.prior_x = bg();
        let mut st = init(&p, &mut rng).unwrap();
        let d = [0.1, 0.4, 0.9];
        let x_bar = random(3, 5, &mut rng);
        let s_bar = random(4, 3, &mut rng);
        let cov = HermitianPsd::from_diagonal(&d).unwrap();
        with_messages(&mut st, x_bar.clone(), cov.clone(), s_bar.clone(), cov);
        let cfg = EngineConfig::default();
        let (x, ux) = msg_x_posterior(&st, &p, &cfg).unwrap();
        let (s, vs) = msg_s_posterior(&st, &p, &cfg).unwrap();
        let prior = bg();
        for kk in 0..3 {
            let mut acc = 0.0;
            for t in 0..5 {
                let (m, v) = prior
                    .denoise(PseudoObservation::new(x_bar[(kk, t)], d[kk]).unwrap())
                    .unwrap();
                assert!((x[(kk, t)] - m).norm() < 1e-12);
                acc += v;
            }
            assert!((ux.diagonal()[kk] - acc / 5.0).abs() < 1e-12);
            let mut acc = 0.0;
            for l in 0..4 {
                let (m, v) = prior
                    .denoise(PseudoObservation::new(s_bar[(l, kk)], d[kk]).unwrap())
                    .unwrap();
                assert!((s[(l, kk)] - m).norm() < 1e-12);
                acc += v;
            }
            assert!((vs.diagonal()[kk] - acc / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_message_covariance_returns_message_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (p, _, x) = identity_problem(4, 3, 5, 0.1, &mut rng);
        let mut st = init(&p, &mut rng).unwrap();
        let tiny = HermitianPsd::scaled_identity(3, 1e-12).unwrap();
        with_messages(&mut st, x.clone(), tiny.clone(), CMatrix::zeros(4, 3), tiny);
        let (xh, ux) = msg_x_posterior(&st, &p, &EngineConfig::default()).unwrap();
        assert!(rel_diff(&xh, &x) < 1e-10);
        assert!(ux.diagonal().iter().all(|&u| u < 1e-11));
    }

    #[test]
    fn zero_sparsity_prior_zeroes_s() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (mut p, _, _) = identity_problem(4, 3, 5, 0.1, &mut rng);
        p.prior_s = Prior::bernoulli_gaussian(0.0, 1.0).unwrap();
        let mut st = init(&p, &mut rng).unwrap();
        let b = random(3, 3, &mut rng);
        let cov = HermitianPsd::new(&b * b.adjoint() + CMatrix::identity(3, 3)).unwrap();
        with_messages(
            &mut st,
            random(3, 5, &mut rng),
            cov.clone(),
            random(4, 3, &mut rng),
            cov,
        );
        let (s, vs) = msg_s_posterior(&st, &p, &EngineConfig::default()).unwrap();
        assert_eq!(s, CMatrix::zeros(4, 3));
        assert_eq!(vs.diagonal(), vec![0.0; 3]);
    }

    #[test]
    fn gaussian_closed_form_matches_whitened_amp() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let k = 6;
        let b = random(k, k, &mut rng);
        let cov = HermitianPsd::new((&b * b.adjoint()).scale(0.1) + CMatrix::identity(k, k)).unwrap();
        assert!(cov.condition_number().unwrap() <= 100.0);
        let mean = random(k, 4, &mut rng);
        let prior = Prior::standard_gaussian();
        let auto = EngineConfig::default();
        let whitened = EngineConfig {
            posterior_path: PosteriorPath::Whitened,
            ..EngineConfig::default()
        };
        let (a, _) = column_posterior(&mean, &cov, &prior, &auto, "c").unwrap();
        let (w, _) = column_posterior(&mean, &cov, &prior, &whitened, "c").unwrap();
        assert!(rel_diff(&a, &w) < 1e-4, "{}", rel_diff(&a, &w));
    }

    #[test]
    fn step_is_pure_and_keeps_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (p, _, _) = identity_problem(6, 2, 8, 0.01, &mut rng);
        let st = init(&p, &mut rng).unwrap();
        let copy = st.clone();
        let cfg = EngineConfig::default();
        let a = step(&st, &p, &cfg).unwrap();
        let b = step(&st, &p, &cfg).unwrap();
        assert_eq!(st, copy);
        assert_eq!(a, b);
        assert_eq!(a.iteration, 1);
        a.check_invariants().unwrap();
    }

    #[test]
    fn step_errors_name_the_failing_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (p, _, _) = identity_problem(6, 2, 8, 0.01, &mut rng);
        let mut st = init(&p, &mut rng).unwrap();
        st.s_hat.fill(c(0.0, 0.0));
        st.v_s = HermitianPsd::scaled_identity(2, 0.0).unwrap();
        let err = step(&st, &p, &EngineConfig::default()).unwrap_err();
        match &err {
            HvmpError::Step { step, .. } => assert_eq!(*step, "message to X"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(err.root(), HvmpError::Singular { .. }));
    }

    #[test]
    fn near_noiseless_residual_decreases_early() {
        let cfg = EngineConfig::default();
        let mut good = 0;
        let seeds = 50;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (l, k, t) = (8, 2, 16);
            // well-posed: S has full column rank
            let mut s = bg().sample_matrix(l, k, &mut rng);
            while (0..k).any(|j| s.column(j).norm() == 0.0) {
                s = bg().sample_matrix(l, k, &mut rng);
            }
            let x = Prior::standard_gaussian().sample_matrix(k, t, &mut rng);
            let op = LinearOperator::dense(CMatrix::identity(l * t, l * t), l, t).unwrap();
            let p = Problem::new(op, vec(&(&s * &x)), 1e-4, bg(), Prior::standard_gaussian(), k).unwrap();
            let mut st = init(&p, &mut rng).unwrap();
            let r0 = p.residual_norm(&st.s_hat, &st.x_hat).unwrap();
            let mut ok = true;
            for _ in 0..5 {
                match step(&st, &p, &cfg) {
                    Ok(next) => st = next,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            good += (ok && p.residual_norm(&st.s_hat, &st.x_hat).unwrap() < r0) as usize;
        }
        assert!(good as f64 >= 0.9 * seeds as f64, "{good}/{seeds}");
    }

    #[test]
    fn run_counts_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (p, _, _) = identity_problem(6, 2, 8, 0.01, &mut rng);
        let cfg = EngineConfig::default();
        let out = run(&p, &cfg, 1, &mut rng, None, |_| false).unwrap();
        assert_eq!(out.trajectory.len(), 1);
        assert_eq!(out.state.iteration, 1);
        let out = run(&p, &cfg, 7, &mut rng, Some(StopRule { rel_tol: 0.0 }), |_| false).unwrap();
        assert_eq!(out.trajectory.len(), 7);
        assert!(!out.stopped_early);
        let out = run(&p, &cfg, 7, &mut rng, None, |s| s.iteration == 3).unwrap();
        assert_eq!(out.trajectory.len(), 3);
        assert!(out.stopped_early);
        assert!(matches!(
            run(&p, &cfg, 0, &mut rng, None, |_| false),
            Err(HvmpError::Config(_))
        ));
    }

    #[test]
    fn config_validation() {
        let bad = EngineConfig {
            damping: 0.0,
            ..EngineConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EngineConfig::default().validate().is_ok());
    }
}
