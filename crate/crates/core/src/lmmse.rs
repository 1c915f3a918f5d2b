//! Exact LMMSE detection and its large-system MSE prediction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::model::{ChannelInstance, Observation, PriorBelief, SystemConfig};
use crate::ops::MulCounter;

#[derive(Debug, Clone)]
pub struct LmmseResult {
    pub posterior_mean: Vec<f64>,
    /// Diagonal of the posterior covariance.
    pub posterior_var: Vec<f64>,
    /// Multiplications spent on Gram formation, factorization and solves.
    pub mul_count: u64,
}

/// `x̂ = V (V̄⁻¹ x̄ + σ⁻² Hᵀ y)` with `V = (σ⁻² HᵀH + V̄⁻¹)⁻¹`, solved through a
/// Cholesky factorization of the `N_u × N_u` precision matrix.
pub fn lmmse_detect(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
) -> Result<LmmseResult> {
    let (nu, nr) = (ch.n_users(), ch.n_antennas());
    check_dims(ch, obs, prior)?;
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise_var must be > 0, got {noise_var}")));
    }
    let mut muls = MulCounter::new();
    let inv_noise = 1.0 / noise_var;

    // Lower triangle of σ⁻² HᵀH + V̄⁻¹.
    let mut m = DMatrix::<f64>::zeros(nu, nu);
    for j in 0..nu {
        let cj = ch.column(j);
        for i in j..nu {
            let dot: f64 = ch.column(i).iter().zip(cj).map(|(a, b)| a * b).sum();
            m[(i, j)] = dot * inv_noise;
        }
        muls.add((nu - j) * (nr + 1));
        m[(j, j)] += 1.0 / prior.var[j];
    }
    muls.add(nu);

    let mut rhs = ch.apply_transpose(&obs.y);
    muls.add(nu * nr);
    for k in 0..nu {
        rhs[k] = rhs[k] * inv_noise + prior.mean[k] / prior.var[k];
    }
    muls.add(2 * nu);

    let chol = Cholesky::factor(m, &mut muls)?;
    let posterior_mean = chol.solve(&rhs, &mut muls);
    let posterior_var = chol.inverse_diagonal(&mut muls);
    Ok(LmmseResult { posterior_mean, posterior_var, mul_count: muls.get() })
}

fn check_dims(ch: &ChannelInstance, obs: &Observation, prior: &PriorBelief) -> Result<()> {
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

/// Large-system LMMSE mean squared error for a symmetric prior:
///
/// `v̄ − σ²/(4N_u) (√(snr N_r (1+√β)² + 1) − √(snr N_r (1−√β)² + 1))²`
///
/// with `snr = v̄/σ²`. The root difference is evaluated as
/// `4 snr N_r √β / (a + b)` to avoid cancellation.
pub fn predict_mmse_mse(cfg: &SystemConfig) -> Result<f64> {
    cfg.validate()?;
    let prior_var = cfg.symmetric_prior_var()?;
    if !(cfg.noise_var > 0.0) {
        return Err(Error::InvalidConfig("prediction needs noise_var > 0".into()));
    }
    Ok(mmse_large_system(cfg.n_users as f64, cfg.n_antennas as f64, prior_var, cfg.noise_var))
}

pub(crate) fn mmse_large_system(nu: f64, nr: f64, prior_var: f64, noise_var: f64) -> f64 {
    let snr = prior_var / noise_var;
    let sb = (nu / nr).sqrt();
    let a = (snr * nr * (1.0 + sb).powi(2) + 1.0).sqrt();
    let b = (snr * nr * (1.0 - sb).powi(2) + 1.0).sqrt();
    let diff = 4.0 * snr * nr * sb / (a + b);
    prior_var - noise_var / (4.0 * nu) * diff * diff
}
