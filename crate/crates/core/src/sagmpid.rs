//! Scaled-and-added GMPID.
//!
//! Same graph and variance recursion as [`crate::gmpid`]. The mean
//! recursion runs on `H' = √w H`, `y' = √w y`, keeps the previous sum-node
//! mean with weight `−(w − 1)`, and weights messages with the fixed prior
//! variances `v̄_k` and `v̄ˢ_m = Σ_k h_mk² v̄_k + σ²`. Its fixed point is the
//! LMMSE estimate for every channel, and it converges whenever `w` lies in
//! `(0, 2/λ_max)` of the effective iteration matrix.

use nalgebra::DMatrix;

use crate::analysis::spectral::OffDiagonalGram;
use crate::analysis::{asymptotic_relaxation, gamma_tilde, gram_extremes};
use crate::error::{Error, Result};
use crate::gmpid::{
    check_run_inputs, observation_precision, solve_message_variances, sum_node_variances, variable_node_variances,
    DetectionReport, IterationOptions, MessageState, Schedule, StopRule, Verdict,
};
use crate::model::{mse, ChannelInstance, Observation, PriorBelief, SystemConfig};
use crate::ops::MulCounter;

/// How the relaxation parameter is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum RelaxationMode {
    /// `w = 1/(1 + γ̃ N_r)`.
    #[default]
    Asymptotic,
    /// `w = 2/(λ_min + λ_max)` of the channel's effective iteration matrix.
    ExactEigen,
    Manual(f64),
}

impl RelaxationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Asymptotic => "asymptotic",
            Self::ExactEigen => "exact_eigen",
            Self::Manual(_) => "manual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationChoice {
    pub w: f64,
    pub mode: RelaxationMode,
    /// Extreme eigenvalues of `Ã`, when they were computed.
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub gamma_tilde: f64,
}

impl RelaxationChoice {
    /// A relaxation that skips the convergence-window check, for
    /// demonstrating divergence.
    pub fn manual_unchecked(w: f64, gamma_tilde: f64) -> Self {
        Self { w, mode: RelaxationMode::Manual(w), lambda_min: None, lambda_max: None, gamma_tilde }
    }
}

/// `Γ_m = v̄ / v̄ˢ_m = 1/(d_m + σ²/v̄)` with `d_m` the exact row energy.
fn effective_weights(ch: &ChannelInstance, prior_var: f64, noise_var: f64) -> Vec<f64> {
    ch.gram_diag.iter().map(|d| 1.0 / (d + noise_var / prior_var)).collect()
}

/// Effective iteration matrix `Ã = Γ^½ (H Hᵀ − D) Γ^½ + I`.
///
/// The sum-node means obey `xˢ(τ) = (I − w Ã') xˢ(τ−1) + const` with
/// `Ã' = I + (H Hᵀ − D) Γ`, which is similar to `Ã`. With `Γ = γ̃ I` it is
/// the large-system matrix `A = γ̃ (H Hᵀ − D) + I`.
pub fn effective_matrix<'a>(ch: &'a ChannelInstance, prior_var: f64, noise_var: f64) -> OffDiagonalGram<'a> {
    let w = effective_weights(ch, prior_var, noise_var).iter().map(|g| g.sqrt()).collect();
    OffDiagonalGram::new(ch, 1.0, 1.0).with_weights(w)
}

/// Picks `w` for one channel and checks it against `(0, 2/λ_max)`.
///
/// In asymptotic mode the window uses the large-system edge
/// `λ_max = 1 + γ̃ (N_r + 2√(N_u N_r))` and no eigenvalues are computed.
pub fn choose_relaxation(ch: &ChannelInstance, cfg: &SystemConfig, mode: RelaxationMode) -> Result<RelaxationChoice> {
    cfg.validate()?;
    let prior_var = cfg.symmetric_prior_var()?;
    let beta = cfg.load_factor();
    if beta <= 1.0 {
        return Err(Error::NotOverloaded { beta });
    }
    if ch.n_users() != cfg.n_users || ch.n_antennas() != cfg.n_antennas {
        return Err(Error::DimensionMismatch {
            what: "channel vs config",
            expected: cfg.n_users * cfg.n_antennas,
            actual: ch.h.len(),
        });
    }
    let gt = gamma_tilde(cfg)?;
    let (w, lambda_min, lambda_max, upper) = match mode {
        RelaxationMode::Asymptotic => {
            let (nu, nr) = (cfg.n_users as f64, cfg.n_antennas as f64);
            let edge = 1.0 + gt * (nr + 2.0 * (nu * nr).sqrt());
            (asymptotic_relaxation(cfg)?, None, None, 2.0 / edge)
        }
        RelaxationMode::ExactEigen | RelaxationMode::Manual(_) => {
            let (lo, hi) = gram_extremes(&effective_matrix(ch, prior_var, cfg.noise_var))?;
            let w = match mode {
                RelaxationMode::Manual(w) => w,
                _ => 2.0 / (lo + hi),
            };
            (w, Some(lo), Some(hi), 2.0 / hi)
        }
    };
    if !(w > 0.0 && w < upper) {
        return Err(Error::RelaxationOutOfWindow { w, upper });
    }
    Ok(RelaxationChoice { w, mode, lambda_min, lambda_max, gamma_tilde: gt })
}

/// `√w H` and `√w y`, computed once per run.
#[derive(Debug, Clone)]
pub struct ScaledSystem {
    pub h: DMatrix<f64>,
    pub y: Vec<f64>,
    pub w: f64,
}

impl ScaledSystem {
    pub fn new(ch: &ChannelInstance, y: &[f64], w: f64, muls: &mut MulCounter) -> Self {
        let s = w.sqrt();
        muls.add(ch.h.len() + y.len() + 1);
        Self { h: &ch.h * s, y: y.iter().map(|v| v * s).collect(), w }
    }
}

/// `v̄ˢ_m = Σ_k h_mk² v̄_k + σ²`.
pub fn sa_fixed_sum_variances(
    ch: &ChannelInstance,
    prior: &PriorBelief,
    noise_var: f64,
    muls: &mut MulCounter,
) -> Vec<f64> {
    let nr = ch.n_antennas();
    let mut vs = vec![noise_var; nr];
    for (hc, v) in ch.h.as_slice().chunks_exact(nr).zip(&prior.var) {
        for (o, h) in vs.iter_mut().zip(hc) {
            *o += h * h * v;
        }
    }
    muls.add(2 * ch.h.len());
    vs
}

/// Sum-node update: `xˢ_m(τ) = y'_m − Σ_i h'_mi xᵛ_{i→m}(τ−1) − (w − 1) xˢ_m(τ−1)`.
/// Variances follow the unscaled GMPID rule unless frozen.
pub fn sa_sum_node_update(
    state: &mut MessageState,
    ch: &ChannelInstance,
    scaled: &ScaledSystem,
    noise_var: f64,
    muls: &mut MulCounter,
) -> Result<()> {
    let nr = ch.n_antennas();
    if state.var_mean.shape() != scaled.h.shape() || scaled.y.len() != nr {
        return Err(Error::DimensionMismatch {
            what: "message state vs scaled system",
            expected: scaled.h.len(),
            actual: state.var_mean.len(),
        });
    }
    let memory = scaled.w - 1.0;
    let mut acc: Vec<f64> = scaled.y.iter().zip(&state.sum_mean).map(|(y, x)| y - memory * x).collect();
    for (hc, xc) in scaled.h.as_slice().chunks_exact(nr).zip(state.var_mean.as_slice().chunks_exact(nr)) {
        for ((a, h), x) in acc.iter_mut().zip(hc).zip(xc) {
            *a -= h * x;
        }
    }
    muls.add(scaled.h.len() + nr);
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFault("non-finite sum-node mean".into()));
    }
    state.sum_mean = acc;
    if !state.variances_frozen {
        sum_node_variances(state, ch, noise_var, muls);
    }
    Ok(())
}

/// Variable-node update:
/// `xᵛ_{k→m} = v̄_k (Σ_{i≠m} h'_ik xˢ_i / v̄ˢ_i + x̄_k / v̄_k)`.
///
/// Returns the full sums `Σ_m h'_mk xˢ_m / v̄ˢ_m` used by the decision.
pub fn sa_variable_node_update(
    state: &mut MessageState,
    ch: &ChannelInstance,
    scaled: &ScaledSystem,
    prior: &PriorBelief,
    fixed_vs: &[f64],
    muls: &mut MulCounter,
) -> Result<Vec<f64>> {
    let nr = ch.n_antennas();
    if fixed_vs.len() != nr || prior.len() != ch.n_users() {
        return Err(Error::DimensionMismatch { what: "fixed sum variances", expected: nr, actual: fixed_vs.len() });
    }
    let z: Vec<f64> = state.sum_mean.iter().zip(fixed_vs).map(|(x, v)| x / v).collect();
    let mut full = Vec::with_capacity(ch.n_users());
    let hs = scaled.h.as_slice().chunks_exact(nr);
    let xv = state.var_mean.as_mut_slice().chunks_exact_mut(nr);
    for (k, (hc, xc)) in hs.zip(xv).enumerate() {
        let f: f64 = hc.iter().zip(&z).map(|(h, zm)| h * zm).sum();
        let (v, xb) = (prior.var[k], prior.mean[k]);
        for ((x, h), zm) in xc.iter_mut().zip(hc).zip(&z) {
            *x = v * (f - h * zm) + xb;
        }
        full.push(f);
    }
    muls.add(nr + 3 * scaled.h.len());
    if !state.variances_frozen {
        variable_node_variances(state, ch, prior, muls)?;
    }
    Ok(full)
}

/// Decision mean `x̂_k = v̄_k F_k + x̄_k` from the full sums `F`.
pub fn sa_decision_mean(full: &[f64], prior: &PriorBelief, muls: &mut MulCounter) -> Vec<f64> {
    muls.add(full.len());
    full.iter().zip(&prior.var).zip(&prior.mean).map(|((f, v), m)| v * f + m).collect()
}

/// Extrinsic output `v̄ᵉ_k = (Σ_m h_mk² / vˢ_m)⁻¹`,
/// `x̄ᵉ_k = (v̄_k + v̄ᵉ_k) F_k + x̄_k`.
pub fn sa_extrinsic(obs_prec: &[f64], full: &[f64], prior: &PriorBelief) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut mean = Vec::with_capacity(full.len());
    let mut var = Vec::with_capacity(full.len());
    for k in 0..full.len() {
        if !(obs_prec[k] > 0.0) {
            return Err(Error::NumericalFault(format!("user {k} receives no information")));
        }
        let ve = 1.0 / obs_prec[k];
        mean.push((prior.var[k] + ve) * full[k] + prior.mean[k]);
        var.push(ve);
    }
    Ok((mean, var))
}

pub fn sa_gmpid_run(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
    relax: &RelaxationChoice,
    opts: &IterationOptions,
) -> Result<DetectionReport> {
    sa_gmpid_run_observed(ch, obs, prior, noise_var, relax, opts, |_, _| {})
}

/// Like [`sa_gmpid_run`], calling `observer(iteration, decision_mean)` after
/// every iteration.
pub fn sa_gmpid_run_observed(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
    relax: &RelaxationChoice,
    opts: &IterationOptions,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<DetectionReport> {
    check_run_inputs(ch, obs, prior, noise_var)?;
    opts.validate()?;
    if !(relax.w > 0.0 && relax.w.is_finite()) {
        return Err(Error::RelaxationOutOfWindow { w: relax.w, upper: f64::NAN });
    }
    let mut muls = MulCounter::new();
    let mut state = match opts.schedule {
        Schedule::PresolvedVariances => {
            let fp = solve_message_variances(ch, prior, noise_var, opts.variance_tol, opts.variance_max_iters)?;
            muls.add(fp.mul_count as usize);
            MessageState::from_variances(&fp)
        }
        Schedule::Joint => MessageState::new(ch.n_users(), ch.n_antennas()),
    };
    let scaled = ScaledSystem::new(ch, &obs.y, relax.w, &mut muls);
    let fixed_vs = sa_fixed_sum_variances(ch, prior, noise_var, &mut muls);
    let mut obs_prec = observation_precision(&state, ch, &mut muls);

    let mut stop = StopRule::new(opts.tol);
    let mut mse_trace = Vec::new();
    let mut mul_trace = Vec::new();
    let mut verdict = Verdict::MaxIterations;
    let mut estimate = prior.mean.clone();
    let mut full = vec![0.0; ch.n_users()];
    let mut last_norm = 0.0;

    for it in 1..=opts.max_iters {
        state.iteration = it;
        match sa_sum_node_update(&mut state, ch, &scaled, noise_var, &mut muls) {
            Ok(()) => {}
            Err(Error::NumericalFault(_)) => {
                last_norm = f64::INFINITY;
                verdict = Verdict::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
        full = sa_variable_node_update(&mut state, ch, &scaled, prior, &fixed_vs, &mut muls)?;
        if !state.variances_frozen {
            obs_prec = observation_precision(&state, ch, &mut muls);
        }
        estimate = sa_decision_mean(&full, prior, &mut muls);

        mse_trace.push(mse(&estimate, &obs.x_true)?);
        mul_trace.push(muls.get());
        observer(it, &estimate);

        last_norm = state.max_abs_mean();
        if last_norm > opts.divergence_threshold {
            verdict = Verdict::Diverged;
            break;
        }
        if stop.converged(&estimate) {
            verdict = Verdict::Converged;
            break;
        }
    }

    let posterior_var = obs_prec.iter().zip(&prior.var).map(|(p, v)| 1.0 / (p + 1.0 / v)).collect();
    let (extrinsic_mean, extrinsic_var) = sa_extrinsic(&obs_prec, &full, prior)
        .unwrap_or_else(|_| (vec![f64::NAN; ch.n_users()], vec![f64::INFINITY; ch.n_users()]));
    Ok(DetectionReport {
        posterior_mean: estimate,
        posterior_var,
        extrinsic_mean,
        extrinsic_var,
        mse_trace,
        mul_trace,
        verdict,
        mul_count: muls.get(),
        last_message_norm: last_norm,
    })
}
