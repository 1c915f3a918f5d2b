//! Gaussian message passing on the fully connected sum-node / variable-node
//! graph.
//!
//! One iteration is a sum-node update followed by a variable-node update.
//! The sum-node rule subtracts the contribution of *every* user (the sum is
//! not restricted to `i ≠ k`), so the message from antenna `m` is the same
//! for all users and is stored once per antenna. Variable-to-sum messages
//! are stored `N_r × N_u` in the same column-major layout as `H`, so that
//! entry `(m, k)` is the message from user `k` to antenna `m`.
//!
//! Variances never depend on `y`, so by default they are iterated to their
//! fixed point first and the mean recursion runs at the converged values
//! ([`Schedule::PresolvedVariances`]).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{mse, ChannelInstance, Observation, PriorBelief};
use crate::ops::MulCounter;

/// Edge messages of the factor graph.
#[derive(Debug, Clone)]
pub struct MessageState {
    /// `x^v_{k→m}` at `(m, k)`.
    pub var_mean: DMatrix<f64>,
    /// Precision of `x^v_{k→m}` at `(m, k)`; 0 is infinite variance.
    pub var_prec: DMatrix<f64>,
    /// `x^s_{m→k}`, identical for every `k`.
    pub sum_mean: Vec<f64>,
    /// Precision of `x^s_{m→k}`; 0 is infinite variance.
    pub sum_prec: Vec<f64>,
    pub iteration: usize,
    /// When set, the update functions leave precisions untouched.
    pub variances_frozen: bool,
}

impl MessageState {
    /// Initial state: zero means, infinite variances.
    pub fn new(n_users: usize, n_antennas: usize) -> Self {
        Self {
            var_mean: DMatrix::zeros(n_antennas, n_users),
            var_prec: DMatrix::zeros(n_antennas, n_users),
            sum_mean: vec![0.0; n_antennas],
            sum_prec: vec![0.0; n_antennas],
            iteration: 0,
            variances_frozen: false,
        }
    }

    /// Zero means with precisions taken from a variance fixed point; the
    /// precisions stay frozen.
    pub fn from_variances(fp: &VarianceFixedPoint) -> Self {
        let (nr, nu) = fp.var_prec.shape();
        Self {
            var_mean: DMatrix::zeros(nr, nu),
            var_prec: fp.var_prec.clone(),
            sum_mean: vec![0.0; nr],
            sum_prec: fp.sum_prec.clone(),
            iteration: 0,
            variances_frozen: true,
        }
    }

    pub fn n_users(&self) -> usize {
        self.var_mean.ncols()
    }

    pub fn n_antennas(&self) -> usize {
        self.var_mean.nrows()
    }

    /// Variance of `x^s_{m→k}` (any `k`).
    pub fn sum_var(&self, m: usize) -> f64 {
        inv_or_inf(self.sum_prec[m])
    }

    /// Variance of `x^v_{k→m}`.
    pub fn var_var(&self, k: usize, m: usize) -> f64 {
        inv_or_inf(self.var_prec[(m, k)])
    }

    fn check(&self, ch: &ChannelInstance) -> Result<()> {
        if self.var_mean.shape() != ch.h.shape() {
            return Err(Error::DimensionMismatch {
                what: "message state vs channel (users)",
                expected: ch.n_users(),
                actual: self.n_users(),
            });
        }
        Ok(())
    }

    /// Largest message magnitude, or infinity if any message is not finite.
    pub fn max_abs_mean(&self) -> f64 {
        self.var_mean
            .iter()
            .chain(self.sum_mean.iter())
            .try_fold(0.0f64, |acc, v| v.is_finite().then(|| acc.max(v.abs())))
            .unwrap_or(f64::INFINITY)
    }
}

fn inv_or_inf(p: f64) -> f64 {
    if p == 0.0 {
        f64::INFINITY
    } else {
        1.0 / p
    }
}

/// Sum-node mean update: `x^s_m = y_m − Σ_i h_mi x^v_{i→m}`.
pub fn sum_node_means(state: &mut MessageState, ch: &ChannelInstance, y: &[f64], muls: &mut MulCounter) -> Result<()> {
    state.check(ch)?;
    let nr = ch.n_antennas();
    let mut acc = y.to_vec();
    let h = ch.h.as_slice();
    let xv = state.var_mean.as_slice();
    for (hc, xc) in h.chunks_exact(nr).zip(xv.chunks_exact(nr)) {
        for ((a, hv), xvv) in acc.iter_mut().zip(hc).zip(xc) {
            *a -= hv * xvv;
        }
    }
    muls.add(h.len());
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFault("non-finite sum-node mean".into()));
    }
    state.sum_mean = acc;
    Ok(())
}

/// Sum-node variance update: `v^s_m = Σ_i h_mi² v^v_{i→m} + σ²`.
///
/// An infinite incoming variance on an edge with `h_mi ≠ 0` makes the
/// outgoing variance infinite (precision 0).
pub fn sum_node_variances(state: &mut MessageState, ch: &ChannelInstance, noise_var: f64, muls: &mut MulCounter) {
    let nr = ch.n_antennas();
    let mut var = vec![noise_var; nr];
    let mut infinite = vec![false; nr];
    let h = ch.h.as_slice();
    let pv = state.var_prec.as_slice();
    for (hc, pc) in h.chunks_exact(nr).zip(pv.chunks_exact(nr)) {
        for m in 0..nr {
            let hv = hc[m];
            if hv == 0.0 {
                continue;
            }
            if pc[m] == 0.0 {
                infinite[m] = true;
            } else {
                var[m] += hv * hv / pc[m];
            }
        }
    }
    muls.add(2 * h.len() + nr);
    for m in 0..nr {
        state.sum_prec[m] = if infinite[m] { 0.0 } else { 1.0 / var[m] };
    }
}

/// Full sum-node update (means, then variances unless frozen).
pub fn sum_node_update(
    state: &mut MessageState,
    ch: &ChannelInstance,
    obs: &Observation,
    noise_var: f64,
    muls: &mut MulCounter,
) -> Result<()> {
    sum_node_means(state, ch, &obs.y, muls)?;
    if !state.variances_frozen {
        sum_node_variances(state, ch, noise_var, muls);
    }
    Ok(())
}

/// Variable-node precision update:
/// `1/v^v_{k→m} = Σ_{i≠m} h_ik² / v^s_i + 1/v̄_k`, computed as full sum
/// minus the `m`-th term.
pub fn variable_node_variances(
    state: &mut MessageState,
    ch: &ChannelInstance,
    prior: &PriorBelief,
    muls: &mut MulCounter,
) -> Result<()> {
    let nr = ch.n_antennas();
    let mut terms = vec![0.0; nr];
    let sp = &state.sum_prec;
    let pv = state.var_prec.as_mut_slice();
    for (k, (hc, pc)) in ch.h.as_slice().chunks_exact(nr).zip(pv.chunks_exact_mut(nr)).enumerate() {
        let mut full = 0.0;
        for m in 0..nr {
            terms[m] = hc[m] * hc[m] * sp[m];
            full += terms[m];
        }
        let base = full + 1.0 / prior.var[k];
        for m in 0..nr {
            let p = base - terms[m];
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::NumericalFault(format!("non-positive variable-node precision {p} at ({k}, {m})")));
            }
            pc[m] = p;
        }
    }
    muls.add(2 * nr * ch.n_users() + ch.n_users());
    Ok(())
}

/// Variable-node mean update:
/// `x^v_{k→m} = v^v_{k→m} (Σ_{i≠m} h_ik x^s_i / v^s_i + x̄_k / v̄_k)`.
///
/// Returns the unrestricted sums `Σ_m h_mk x^s_m / v^s_m`, which the
/// decision and extrinsic rules reuse.
pub fn variable_node_means(
    state: &mut MessageState,
    ch: &ChannelInstance,
    prior: &PriorBelief,
    muls: &mut MulCounter,
) -> Vec<f64> {
    let (nu, nr) = (ch.n_users(), ch.n_antennas());
    let z: Vec<f64> = state.sum_mean.iter().zip(&state.sum_prec).map(|(x, p)| x * p).collect();
    let mut full_sums = vec![0.0; nu];
    let mut terms = vec![0.0; nr];
    let pv = state.var_prec.as_slice();
    let xv = state.var_mean.as_mut_slice();
    for (k, ((hc, pc), xc)) in
        ch.h.as_slice().chunks_exact(nr).zip(pv.chunks_exact(nr)).zip(xv.chunks_exact_mut(nr)).enumerate()
    {
        let mut full = 0.0;
        for m in 0..nr {
            terms[m] = hc[m] * z[m];
            full += terms[m];
        }
        let prior_term = prior.mean[k] / prior.var[k];
        for m in 0..nr {
            xc[m] = (full - terms[m] + prior_term) / pc[m];
        }
        full_sums[k] = full;
    }
    muls.add(2 * nu * nr + nr + nu);
    full_sums
}

/// Full variable-node update (variances unless frozen, then means).
pub fn variable_node_update(
    state: &mut MessageState,
    ch: &ChannelInstance,
    prior: &PriorBelief,
    muls: &mut MulCounter,
) -> Result<Vec<f64>> {
    state.check(ch)?;
    if state.sum_prec.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NumericalFault("sum-node precisions must be finite and >= 0".into()));
    }
    if !state.variances_frozen {
        variable_node_variances(state, ch, prior, muls)?;
    }
    Ok(variable_node_means(state, ch, prior, muls))
}

/// Per-user precision gathered from all antennas: `Σ_m h_mk² / v^s_m`.
pub(crate) fn observation_precision(state: &MessageState, ch: &ChannelInstance, muls: &mut MulCounter) -> Vec<f64> {
    let nr = ch.n_antennas();
    muls.add(2 * ch.h.len());
    ch.h.as_slice().chunks_exact(nr).map(|hc| hc.iter().zip(&state.sum_prec).map(|(h, p)| h * h * p).sum()).collect()
}

pub(crate) fn observation_sums(state: &MessageState, ch: &ChannelInstance, muls: &mut MulCounter) -> Vec<f64> {
    let z: Vec<f64> = state.sum_mean.iter().zip(&state.sum_prec).map(|(x, p)| x * p).collect();
    muls.add(ch.h.len() + z.len());
    ch.apply_transpose(&z)
}

/// Decision from all incoming sum messages:
/// `v̂_k = (Σ_m h_mk²/v^s_m + 1/v̄_k)⁻¹`, `x̂_k = v̂_k (Σ_m h_mk x^s_m/v^s_m + x̄_k/v̄_k)`.
pub fn decide(
    state: &MessageState,
    ch: &ChannelInstance,
    prior: &PriorBelief,
    muls: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    state.check(ch)?;
    let prec = observation_precision(state, ch, muls);
    let sums = observation_sums(state, ch, muls);
    decide_from_sums(&prec, &sums, prior, muls)
}

fn decide_from_sums(
    obs_prec: &[f64],
    sums: &[f64],
    prior: &PriorBelief,
    muls: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut mean = Vec::with_capacity(sums.len());
    let mut var = Vec::with_capacity(sums.len());
    for k in 0..sums.len() {
        let p = obs_prec[k] + 1.0 / prior.var[k];
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::NumericalFault(format!("non-positive decision precision at user {k}")));
        }
        let v = 1.0 / p;
        mean.push(v * (sums[k] + prior.mean[k] / prior.var[k]));
        var.push(v);
    }
    muls.add(4 * sums.len());
    Ok((mean, var))
}

/// Extrinsic output (decision without the prior):
/// `v̄^e_k = (Σ_m h_mk²/v^s_m)⁻¹`, `x̄^e_k = v̄^e_k Σ_m h_mk x^s_m/v^s_m`.
pub fn extrinsic(state: &MessageState, ch: &ChannelInstance, muls: &mut MulCounter) -> Result<(Vec<f64>, Vec<f64>)> {
    state.check(ch)?;
    let prec = observation_precision(state, ch, muls);
    let sums = observation_sums(state, ch, muls);
    extrinsic_from_sums(&prec, &sums, muls)
}

fn extrinsic_from_sums(obs_prec: &[f64], sums: &[f64], muls: &mut MulCounter) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut mean = Vec::with_capacity(sums.len());
    let mut var = Vec::with_capacity(sums.len());
    for (k, (p, s)) in obs_prec.iter().zip(sums).enumerate() {
        if !(*p > 0.0) {
            return Err(Error::NumericalFault(format!(
                "user {k} receives no information (zero column or infinite variances)"
            )));
        }
        mean.push(s / p);
        var.push(1.0 / p);
    }
    muls.add(2 * sums.len());
    Ok((mean, var))
}

/// Converged variance messages of one channel and prior.
#[derive(Debug, Clone)]
pub struct VarianceFixedPoint {
    pub var_prec: DMatrix<f64>,
    pub sum_prec: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Multiplications spent reaching the fixed point.
    pub mul_count: u64,
}

impl VarianceFixedPoint {
    /// Decision variances `v̂_k` at the fixed point.
    pub fn decision_var(&self, ch: &ChannelInstance, prior: &PriorBelief) -> Vec<f64> {
        let nr = ch.n_antennas();
        ch.h.as_slice()
            .chunks_exact(nr)
            .zip(&prior.var)
            .map(|(hc, pv)| {
                let p: f64 = hc.iter().zip(&self.sum_prec).map(|(h, s)| h * h * s).sum();
                1.0 / (p + 1.0 / pv)
            })
            .collect()
    }
}

/// Iterates the variance recursion from infinite initial variances until
/// the largest relative change of any variable-node variance drops below
/// `tol`, or `max_iters` is reached.
pub fn solve_message_variances(
    ch: &ChannelInstance,
    prior: &PriorBelief,
    noise_var: f64,
    tol: f64,
    max_iters: usize,
) -> Result<VarianceFixedPoint> {
    if prior.len() != ch.n_users() {
        return Err(Error::DimensionMismatch { what: "prior length", expected: ch.n_users(), actual: prior.len() });
    }
    let mut muls = MulCounter::new();
    let mut state = MessageState::new(ch.n_users(), ch.n_antennas());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let old = state.var_prec.clone();
        sum_node_variances(&mut state, ch, noise_var, &mut muls);
        variable_node_variances(&mut state, ch, prior, &mut muls)?;
        // Relative change in variance equals relative change in precision
        // up to second order; precision avoids the division.
        let change = old
            .iter()
            .zip(state.var_prec.iter())
            .map(|(o, n)| if *o == 0.0 { f64::INFINITY } else { (n - o).abs() / o })
            .fold(0.0, f64::max);
        if change < tol {
            converged = true;
            break;
        }
    }
    sum_node_variances(&mut state, ch, noise_var, &mut muls);
    Ok(VarianceFixedPoint {
        var_prec: state.var_prec,
        sum_prec: state.sum_prec,
        iterations,
        converged,
        mul_count: muls.get(),
    })
}

/// How the variance and mean recursions are interleaved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Schedule {
    /// Variances to their fixed point first, then means.
    #[default]
    PresolvedVariances,
    /// Means and variances updated together from the infinite-variance start.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationOptions {
    pub max_iters: usize,
    /// Stop when `‖x̂(τ) − x̂(τ−1)‖ ≤ tol ‖x̂(τ)‖`.
    pub tol: f64,
    /// Any message magnitude above this means divergence.
    pub divergence_threshold: f64,
    pub schedule: Schedule,
    pub variance_tol: f64,
    pub variance_max_iters: usize,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            divergence_threshold: 1e12,
            schedule: Schedule::PresolvedVariances,
            variance_tol: 1e-10,
            variance_max_iters: 500,
        }
    }
}

impl IterationOptions {
    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol > 0.0) || !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidConfig("max_iters >= 1, tol > 0 and divergence_threshold > 0 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Converged,
    MaxIterations,
    Diverged,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::MaxIterations => "max_iterations",
            Verdict::Diverged => "diverged",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub posterior_mean: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub extrinsic_mean: Vec<f64>,
    pub extrinsic_var: Vec<f64>,
    /// MSE of the decision after each iteration.
    pub mse_trace: Vec<f64>,
    /// Cumulative multiplications after each iteration (setup included).
    pub mul_trace: Vec<u64>,
    pub verdict: Verdict,
    pub mul_count: u64,
    /// Largest message magnitude seen in the last iteration.
    pub last_message_norm: f64,
}

impl DetectionReport {
    pub fn iterations(&self) -> usize {
        self.mse_trace.len()
    }
}

pub(crate) fn check_run_inputs(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
) -> Result<()> {
    let checks = [
        ("observation length", ch.n_antennas(), obs.y.len()),
        ("x_true length", ch.n_users(), obs.x_true.len()),
        ("prior length", ch.n_users(), prior.len()),
    ];
    for (what, expected, actual) in checks {
        if expected != actual {
            return Err(Error::DimensionMismatch { what, expected, actual });
        }
    }
    if !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise_var must be > 0, got {noise_var}")));
    }
    Ok(())
}

/// Tracks the stopping rule shared by the iterative detectors.
pub(crate) struct StopRule {
    prev: Option<Vec<f64>>,
    tol: f64,
}

impl StopRule {
    pub(crate) fn new(tol: f64) -> Self {
        Self { prev: None, tol }
    }

    pub(crate) fn converged(&mut self, current: &[f64]) -> bool {
        let done = match &self.prev {
            Some(p) => {
                let diff: f64 = p.iter().zip(current).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let norm: f64 = current.iter().map(|v| v * v).sum::<f64>().sqrt();
                diff <= self.tol * norm
            }
            None => false,
        };
        self.prev = Some(current.to_vec());
        done
    }
}

/// Runs GMPID to convergence, divergence or the iteration cap.
pub fn gmpid_run(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
    opts: &IterationOptions,
) -> Result<DetectionReport> {
    gmpid_run_observed(ch, obs, prior, noise_var, opts, |_, _| {})
}

/// Like [`gmpid_run`], calling `observer(iteration, decision_mean)` after
/// every iteration.
pub fn gmpid_run_observed(
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
    opts: &IterationOptions,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<DetectionReport> {
    check_run_inputs(ch, obs, prior, noise_var)?;
    opts.validate()?;
    let mut muls = MulCounter::new();

    let (mut state, fixed_prec) = match opts.schedule {
        Schedule::PresolvedVariances => {
            let fp = solve_message_variances(ch, prior, noise_var, opts.variance_tol, opts.variance_max_iters)?;
            muls.add(fp.mul_count as usize);
            let state = MessageState::from_variances(&fp);
            let prec = observation_precision(&state, ch, &mut muls);
            (state, Some(prec))
        }
        Schedule::Joint => (MessageState::new(ch.n_users(), ch.n_antennas()), None),
    };

    let mut stop = StopRule::new(opts.tol);
    let mut mse_trace = Vec::new();
    let mut mul_trace = Vec::new();
    let mut verdict = Verdict::MaxIterations;
    let mut decision = (prior.mean.clone(), prior.var.clone());
    let mut last_prec = fixed_prec.clone().unwrap_or_else(|| vec![0.0; ch.n_users()]);
    let mut last_sums = vec![0.0; ch.n_users()];
    let mut last_norm = 0.0;

    for it in 1..=opts.max_iters {
        state.iteration = it;
        match sum_node_update(&mut state, ch, obs, noise_var, &mut muls) {
            Ok(()) => {}
            Err(Error::NumericalFault(_)) => {
                last_norm = f64::INFINITY;
                verdict = Verdict::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
        let prec = match &fixed_prec {
            Some(p) => p.clone(),
            None => observation_precision(&state, ch, &mut muls),
        };
        let sums = variable_node_update(&mut state, ch, prior, &mut muls)?;
        decision = decide_from_sums(&prec, &sums, prior, &mut muls)?;
        last_prec = prec;
        last_sums = sums;

        mse_trace.push(mse(&decision.0, &obs.x_true)?);
        mul_trace.push(muls.get());
        observer(it, &decision.0);

        last_norm = state.max_abs_mean();
        if last_norm > opts.divergence_threshold {
            verdict = Verdict::Diverged;
            break;
        }
        if stop.converged(&decision.0) {
            verdict = Verdict::Converged;
            break;
        }
    }

    let (extrinsic_mean, extrinsic_var) = extrinsic_from_sums(&last_prec, &last_sums, &mut MulCounter::new())
        .unwrap_or_else(|_| (vec![f64::NAN; ch.n_users()], vec![f64::INFINITY; ch.n_users()]));
    Ok(DetectionReport {
        posterior_mean: decision.0,
        posterior_var: decision.1,
        extrinsic_mean,
        extrinsic_var,
        mse_trace,
        mul_trace,
        verdict,
        mul_count: muls.get(),
        last_message_norm: last_norm,
    })
}
