//! Closed-form predictions and numerical convergence checks for the
//! message-passing detectors.
//!
//! Everything derived from a [`SystemConfig`] alone (no channel draw) is a
//! large-system prediction. Functions taking a [`ChannelInstance`] measure
//! the quantity on that realization, always with the exact diagonal of
//! `H Hᵀ` rather than its `N_u·I` approximation.

pub mod classical;
pub mod spectral;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmpid::VarianceFixedPoint;
use crate::linalg::spd_solve;
use crate::model::{ChannelInstance, Observation, PriorBelief, SystemConfig};
use crate::ops::MulCounter;
use spectral::{extreme_eigenvalues_or_dense, LinearOperator, OffDiagonalGram, PowerOptions, DENSE_FALLBACK_LIMIT};

/// Load factor above which the large-system GMPID radius is below one for
/// every prior SNR: `(√2 − 1)⁻² = 3 + 2√2`.
pub const BETA_THRESHOLD: f64 = 3.0 + 2.0 * std::f64::consts::SQRT_2;

/// Large-system fixed point of the GMPID variance recursion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSolution {
    /// Decision variance `v̂`.
    pub v_hat: f64,
    /// Sum-node variance `N_u v̂ + σ²`.
    pub v_s: f64,
    /// `v̂ / v_s`.
    pub gamma: f64,
}

fn scalar_params(cfg: &SystemConfig) -> Result<(f64, f64, f64, f64)> {
    cfg.validate()?;
    let v = cfg.symmetric_prior_var()?;
    if !(cfg.noise_var > 0.0) {
        return Err(Error::InvalidConfig("analysis needs noise_var > 0".into()));
    }
    Ok((cfg.n_users as f64, cfg.n_antennas as f64, v, cfg.noise_var))
}

/// Positive root of `(N_u/v̄) v² + (σ²/v̄ + N_r − N_u) v − σ² = 0`.
pub fn solve_variance_fixed_point(cfg: &SystemConfig) -> Result<VarianceSolution> {
    let (nu, nr, v, s2) = scalar_params(cfg)?;
    let v_hat = positive_root(nu / v, s2 / v + nr - nu, -s2);
    let v_s = nu * v_hat + s2;
    Ok(VarianceSolution { v_hat, v_s, gamma: v_hat / v_s })
}

/// Positive root of `a x² + b x + c` for `a > 0`, `c < 0`, without
/// subtracting nearly equal quantities.
fn positive_root(a: f64, b: f64, c: f64) -> f64 {
    let q = -0.5 * (b + b.signum() * (b * b - 4.0 * a * c).sqrt());
    if b >= 0.0 {
        c / q
    } else {
        q / a
    }
}

/// `γ̃ = 1/(N_u + σ²/v̄)`.
pub fn gamma_tilde(cfg: &SystemConfig) -> Result<f64> {
    let (nu, _, v, s2) = scalar_params(cfg)?;
    Ok(1.0 / (nu + s2 / v))
}

/// Large-system optimal relaxation `1/(1 + γ̃ N_r)`.
pub fn asymptotic_relaxation(cfg: &SystemConfig) -> Result<f64> {
    Ok(1.0 / (1.0 + gamma_tilde(cfg)? * cfg.n_antennas as f64))
}

/// Large-system GMPID radius `γ N_u (1/β + 2/√β)`.
pub fn rho_gmpid_asymptotic(cfg: &SystemConfig) -> Result<f64> {
    let gamma = solve_variance_fixed_point(cfg)?.gamma;
    let beta = cfg.load_factor();
    Ok(gamma * cfg.n_users as f64 * (1.0 / beta + 2.0 / beta.sqrt()))
}

/// Large-system SA-GMPID radius at the optimal relaxation,
/// `2γ̃√(N_u N_r) / (1 + γ̃ N_r)`.
pub fn rho_sa_asymptotic(cfg: &SystemConfig) -> Result<f64> {
    let gt = gamma_tilde(cfg)?;
    let (nu, nr) = (cfg.n_users as f64, cfg.n_antennas as f64);
    Ok(2.0 * gt * (nu * nr).sqrt() / (1.0 + gt * nr))
}

/// Strict inequality `β > 3 + 2√2`.
pub fn beta_threshold_met(beta: f64) -> bool {
    beta > BETA_THRESHOLD
}

/// GMPID mean iteration matrix `γ (H Hᵀ − D)`.
pub fn gmpid_iteration_operator(ch: &ChannelInstance, gamma: f64) -> OffDiagonalGram<'_> {
    OffDiagonalGram::new(ch, gamma, 0.0)
}

/// `A = γ̃ (H Hᵀ − D) + I`.
pub fn sa_matrix(ch: &ChannelInstance, gamma_tilde: f64) -> OffDiagonalGram<'_> {
    OffDiagonalGram::new(ch, gamma_tilde, 1.0)
}

/// SA-GMPID iteration matrix `I − w A`.
pub fn sa_iteration_operator(ch: &ChannelInstance, gamma_tilde: f64, w: f64) -> OffDiagonalGram<'_> {
    sa_matrix(ch, gamma_tilde).affine(-w, 1.0)
}

/// Extreme eigenvalues of a Gram-type operator, materialized first when it
/// is small enough for the dense product to be cheaper than repeated
/// matrix-free applications.
pub fn gram_extremes(op: &OffDiagonalGram<'_>) -> Result<(f64, f64)> {
    let opts = PowerOptions::default();
    if op.dim() <= DENSE_FALLBACK_LIMIT {
        extreme_eigenvalues_or_dense(&op.to_dense(), &opts)
    } else {
        extreme_eigenvalues_or_dense(op, &opts)
    }
}

pub fn gram_spectral_radius(op: &OffDiagonalGram<'_>) -> Result<f64> {
    let (lo, hi) = gram_extremes(op)?;
    Ok(lo.abs().max(hi.abs()))
}

/// Measured and predicted convergence behaviour of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePrediction {
    /// `ρ(γ (H Hᵀ − D))`.
    pub rho_gmpid_empirical: f64,
    pub rho_gmpid_asymptotic: f64,
    /// `ρ(I − w A)` at the large-system optimal `w`.
    pub rho_sa: f64,
    /// Strict row diagonal dominance of `I + γ (H Hᵀ − D)`.
    pub diag_dominant: bool,
    pub beta_threshold_met: bool,
    pub gamma: f64,
    pub v_hat: f64,
    pub v_s: f64,
}

/// Evaluates both sufficient GMPID convergence conditions on `ch` together
/// with the SA-GMPID radius.
pub fn predict_convergence(ch: &ChannelInstance, cfg: &SystemConfig) -> Result<ConvergencePrediction> {
    check_channel(ch, cfg)?;
    let sol = solve_variance_fixed_point(cfg)?;
    let gt = gamma_tilde(cfg)?;
    let w = asymptotic_relaxation(cfg)?;

    let g = gmpid_iteration_operator(ch, sol.gamma).to_dense();
    let diag_dominant = (0..g.nrows()).all(|m| {
        let off: f64 = (0..g.ncols()).filter(|j| *j != m).map(|j| g[(m, j)].abs()).sum();
        off < 1.0
    });
    let opts = PowerOptions::default();
    let (lo, hi) = extreme_eigenvalues_or_dense(&g, &opts)?;
    let rho_sa = gram_spectral_radius(&sa_iteration_operator(ch, gt, w))?;

    Ok(ConvergencePrediction {
        rho_gmpid_empirical: lo.abs().max(hi.abs()),
        rho_gmpid_asymptotic: rho_gmpid_asymptotic(cfg)?,
        rho_sa,
        diag_dominant,
        beta_threshold_met: beta_threshold_met(cfg.load_factor()),
        gamma: sol.gamma,
        v_hat: sol.v_hat,
        v_s: sol.v_s,
    })
}

fn check_channel(ch: &ChannelInstance, cfg: &SystemConfig) -> Result<()> {
    if ch.n_users() != cfg.n_users || ch.n_antennas() != cfg.n_antennas {
        return Err(Error::DimensionMismatch {
            what: "channel vs config",
            expected: cfg.n_users * cfg.n_antennas,
            actual: ch.h.len(),
        });
    }
    Ok(())
}

fn check_inputs(ch: &ChannelInstance, obs: &Observation, prior: &PriorBelief, cfg: &SystemConfig) -> Result<()> {
    check_channel(ch, cfg)?;
    if obs.y.len() != ch.n_antennas() {
        return Err(Error::DimensionMismatch {
            what: "observation length",
            expected: ch.n_antennas(),
            actual: obs.y.len(),
        });
    }
    if prior.len() != ch.n_users() {
        return Err(Error::DimensionMismatch { what: "prior length", expected: ch.n_users(), actual: prior.len() });
    }
    Ok(())
}

/// Large-system limit of the GMPID means,
/// `x̂ = (θ HᵀH + I)⁻¹ (θ Hᵀy + α x̄)` with `θ = v̂/σ²`, `α = v̂/v̄`.
pub fn gmpid_limit_formula(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    cfg: &SystemConfig,
) -> Result<Vec<f64>> {
    check_inputs(ch, obs, prior, cfg)?;
    let sol = solve_variance_fixed_point(cfg)?;
    let v = cfg.symmetric_prior_var()?;
    let theta = sol.v_hat / cfg.noise_var;
    let alpha = sol.v_hat / v;

    let mut m = ch.h.transpose() * &ch.h * theta;
    for k in 0..m.nrows() {
        m[(k, k)] += 1.0;
    }
    let hty = ch.apply_transpose(&obs.y);
    let rhs: Vec<f64> = hty.iter().zip(&prior.mean).map(|(a, xb)| theta * a + alpha * xb).collect();
    spd_solve(m, &rhs, &mut MulCounter::new())
}

/// The same limit evaluated in the antenna domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualForm {
    /// `x* = ((1 − γN_u) I + γ H Hᵀ)⁻¹ (y − α H x̄)`.
    pub x_star: Vec<f64>,
    /// `γ Hᵀ x* + α x̄`.
    pub x_hat: Vec<f64>,
}

pub fn gmpid_limit_residual_form(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    cfg: &SystemConfig,
) -> Result<ResidualForm> {
    check_inputs(ch, obs, prior, cfg)?;
    let sol = solve_variance_fixed_point(cfg)?;
    let v = cfg.symmetric_prior_var()?;
    let alpha = sol.v_hat / v;
    let gamma = sol.gamma;

    let mut m = &ch.h * ch.h.transpose() * gamma;
    for r in 0..m.nrows() {
        m[(r, r)] += 1.0 - gamma * cfg.n_users as f64;
    }
    let hx = ch.apply(&prior.mean);
    let rhs: Vec<f64> = obs.y.iter().zip(&hx).map(|(y, h)| y - alpha * h).collect();
    let x_star = spd_solve(m, &rhs, &mut MulCounter::new())?;
    let x_hat = ch.apply_transpose(&x_star).iter().zip(&prior.mean).map(|(a, xb)| gamma * a + alpha * xb).collect();
    Ok(ResidualForm { x_star, x_hat })
}

/// Exact fixed point of the GMPID mean recursion at the given message
/// variances, for one finite channel.
///
/// Substituting the variable-node rule into the sum-node rule gives the
/// antenna-domain system
/// `(I + (G − D_G) P) xˢ = y − (H ∘ Vᵛ)(x̄ / v̄)`, where `Vᵛ` holds the
/// variable-node variances, `G = (H ∘ Vᵛ) Hᵀ`, `D_G` its diagonal and `P`
/// the sum-node precisions. The decision is then formed from `xˢ`.
pub fn gmpid_finite_fixed_point(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    fp: &VarianceFixedPoint,
) -> Result<Vec<f64>> {
    let (nr, nu) = ch.h.shape();
    if fp.var_prec.shape() != (nr, nu) || obs.y.len() != nr || prior.len() != nu {
        return Err(Error::DimensionMismatch {
            what: "fixed-point inputs",
            expected: nr * nu,
            actual: fp.var_prec.len(),
        });
    }
    let hv = DMatrix::from_fn(nr, nu, |m, k| {
        let p = fp.var_prec[(m, k)];
        if p > 0.0 {
            ch.h[(m, k)] / p
        } else {
            0.0
        }
    });
    let mut lhs = &hv * ch.h.transpose();
    for m in 0..nr {
        lhs[(m, m)] = 0.0;
    }
    for j in 0..nr {
        let p = fp.sum_prec[j];
        lhs.column_mut(j).scale_mut(p);
        lhs[(j, j)] += 1.0;
    }
    let ratio = DVector::from_iterator(nu, prior.mean.iter().zip(&prior.var).map(|(m, v)| m / v));
    let rhs = DVector::from_column_slice(&obs.y) - &hv * ratio;
    let xs = lhs.lu().solve(&rhs).ok_or_else(|| Error::NumericalFault("singular fixed-point system".into()))?;

    let z: Vec<f64> = xs.iter().zip(&fp.sum_prec).map(|(x, p)| x * p).collect();
    let sums = ch.apply_transpose(&z);
    let v_hat = fp.decision_var(ch, prior);
    Ok((0..nu).map(|k| v_hat[k] * (sums[k] + prior.mean[k] / prior.var[k])).collect())
}
