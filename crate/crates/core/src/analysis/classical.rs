//! Stationary iterations `x(t) = B x(t−1) + c` and the Jacobi and
//! Richardson baselines for the LMMSE normal equations.
//!
//! The baselines solve the antenna-domain system
//! `(H V̄ Hᵀ + σ² I) u = y − H x̄` and map back with `x̂ = x̄ + V̄ Hᵀ u`,
//! which is the LMMSE estimate.

use crate::error::{Error, Result};
use crate::gmpid::{check_run_inputs, DetectionReport, IterationOptions, StopRule, Verdict};
use crate::model::{mse, ChannelInstance, Observation, PriorBelief};
use crate::ops::MulCounter;

use super::spectral::{extreme_eigenvalues_or_dense, materialize, LinearOperator, PowerOptions, DENSE_FALLBACK_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalOptions {
    pub max_iters: usize,
    /// Converged once `‖x(t) − x(t−1)‖ ≤ tol · ‖c‖`, which is the residual
    /// of `(I − B) x = c` at `x(t−1)`.
    pub tol: f64,
    pub divergence_threshold: f64,
}

impl Default for ClassicalOptions {
    fn default() -> Self {
        Self { max_iters: 1000, tol: 1e-10, divergence_threshold: 1e12 }
    }
}

#[derive(Debug, Clone)]
pub struct ClassicalOutcome {
    pub solution: Vec<f64>,
    /// Step norm `‖x(t) − x(t−1)‖` per iteration.
    pub trace: Vec<f64>,
    pub verdict: Verdict,
    pub mul_count: u64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Runs `x(t) = B x(t−1) + c` from `x(0) = 0`.
pub fn classical_iterate(b: &dyn LinearOperator, c: &[f64], opts: &ClassicalOptions) -> Result<ClassicalOutcome> {
    if c.len() != b.dim() {
        return Err(Error::DimensionMismatch { what: "iteration offset", expected: b.dim(), actual: c.len() });
    }
    let scale = norm(c);
    let mut x = vec![0.0; c.len()];
    let mut next = vec![0.0; c.len()];
    let mut trace = Vec::new();
    let mut muls = MulCounter::new();
    let mut verdict = Verdict::MaxIterations;
    for _ in 0..opts.max_iters {
        b.apply(&x, &mut next);
        muls.add(b.apply_cost());
        next.iter_mut().zip(c).for_each(|(a, ci)| *a += ci);
        let step = x.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        trace.push(step);
        std::mem::swap(&mut x, &mut next);
        if !step.is_finite() || norm(&x) > opts.divergence_threshold {
            verdict = Verdict::Diverged;
            break;
        }
        if step <= opts.tol * scale {
            verdict = Verdict::Converged;
            break;
        }
    }
    Ok(ClassicalOutcome { solution: x, trace, verdict, mul_count: muls.get() })
}

/// `M = H V̄ Hᵀ + σ² I`, applied through `H`.
#[derive(Debug, Clone)]
pub struct NormalEquations<'a> {
    ch: &'a ChannelInstance,
    prior_var: &'a [f64],
    noise_var: f64,
}

impl<'a> NormalEquations<'a> {
    pub fn new(ch: &'a ChannelInstance, prior_var: &'a [f64], noise_var: f64) -> Self {
        Self { ch, prior_var, noise_var }
    }

    /// `M_mm = Σ_k h_mk² v̄_k + σ²`.
    pub fn diagonal(&self) -> Vec<f64> {
        let nr = self.ch.n_antennas();
        let mut d = vec![self.noise_var; nr];
        for (hc, v) in self.ch.h.as_slice().chunks_exact(nr).zip(self.prior_var) {
            for (dm, h) in d.iter_mut().zip(hc) {
                *dm += h * h * v;
            }
        }
        d
    }
}

impl LinearOperator for NormalEquations<'_> {
    fn dim(&self) -> usize {
        self.ch.n_antennas()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let t: Vec<f64> = self.ch.apply_transpose(x).iter().zip(self.prior_var).map(|(a, v)| a * v).collect();
        let s = self.ch.apply(&t);
        for ((o, a), xi) in out.iter_mut().zip(&s).zip(x) {
            *o = a + self.noise_var * xi;
        }
    }

    fn apply_cost(&self) -> usize {
        2 * self.ch.h.len() + self.ch.n_users() + self.ch.n_antennas()
    }
}

/// `B = I − diag(p) M`.
#[derive(Debug, Clone)]
pub struct Preconditioned<'a> {
    pub m: NormalEquations<'a>,
    pub p: Vec<f64>,
}

impl LinearOperator for Preconditioned<'_> {
    fn dim(&self) -> usize {
        self.m.dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.m.apply(x, out);
        for ((o, xi), pi) in out.iter_mut().zip(x).zip(&self.p) {
            *o = xi - pi * *o;
        }
    }

    fn apply_cost(&self) -> usize {
        self.m.apply_cost() + self.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationaryScheme {
    /// `p = 1 / diag(M)`.
    Jacobi,
    /// `p = ω = 2/(λ_min(M) + λ_max(M))`.
    Richardson,
}

/// A baseline iteration assembled for one channel and prior.
#[derive(Debug, Clone)]
pub struct StationaryProblem<'a> {
    pub b: Preconditioned<'a>,
    pub c: Vec<f64>,
    pub scheme: StationaryScheme,
    ch: &'a ChannelInstance,
    prior: &'a PriorBelief,
    /// Multiplications spent building `b` and `c`. The eigenvalue bounds
    /// behind the Richardson step are taken as known and not counted.
    pub setup_muls: u64,
}

impl<'a> StationaryProblem<'a> {
    pub fn new(
        scheme: StationaryScheme,
        ch: &'a ChannelInstance,
        obs: &Observation,
        prior: &'a PriorBelief,
        noise_var: f64,
    ) -> Result<Self> {
        check_run_inputs(ch, obs, prior, noise_var)?;
        let m = NormalEquations::new(ch, &prior.var, noise_var);
        let nr = ch.n_antennas();
        let mut muls = MulCounter::new();
        let p = match scheme {
            StationaryScheme::Jacobi => {
                muls.add(2 * ch.h.len() + nr);
                m.diagonal().iter().map(|d| 1.0 / d).collect()
            }
            StationaryScheme::Richardson => {
                let opts = PowerOptions::default();
                let (lo, hi) = if nr <= DENSE_FALLBACK_LIMIT {
                    extreme_eigenvalues_or_dense(&materialize(&m), &opts)?
                } else {
                    extreme_eigenvalues_or_dense(&m, &opts)?
                };
                vec![2.0 / (lo + hi); nr]
            }
        };
        let hx = ch.apply(&prior.mean);
        muls.add(ch.h.len() + nr);
        let c = obs.y.iter().zip(&hx).zip(&p).map(|((y, h), pi)| pi * (y - h)).collect();
        Ok(Self { b: Preconditioned { m, p }, c, scheme, ch, prior, setup_muls: muls.get() })
    }

    /// `x̂ = x̄ + V̄ Hᵀ u`.
    pub fn recover(&self, u: &[f64], muls: &mut MulCounter) -> Vec<f64> {
        muls.add(self.ch.h.len() + self.ch.n_users());
        self.ch
            .apply_transpose(u)
            .iter()
            .zip(&self.prior.mean)
            .zip(&self.prior.var)
            .map(|((a, m), v)| m + v * a)
            .collect()
    }
}

/// Runs a baseline with the detectors' stopping rule and reporting. The
/// report carries no variances or extrinsic output.
pub fn classical_detect(
    scheme: StationaryScheme,
    ch: &ChannelInstance,
    obs: &Observation,
    prior: &PriorBelief,
    noise_var: f64,
    opts: &IterationOptions,
) -> Result<DetectionReport> {
    opts.validate()?;
    let problem = StationaryProblem::new(scheme, ch, obs, prior, noise_var)?;
    let mut muls = MulCounter::new();
    muls.add(problem.setup_muls as usize);

    let mut u = vec![0.0; ch.n_antennas()];
    let mut next = vec![0.0; ch.n_antennas()];
    let mut stop = StopRule::new(opts.tol);
    let mut verdict = Verdict::MaxIterations;
    let mut mse_trace = Vec::new();
    let mut mul_trace = Vec::new();
    let mut estimate = prior.mean.clone();
    let mut last_norm = 0.0;
    for _ in 0..opts.max_iters {
        problem.b.apply(&u, &mut next);
        muls.add(problem.b.apply_cost());
        next.iter_mut().zip(&problem.c).for_each(|(a, c)| *a += c);
        std::mem::swap(&mut u, &mut next);
        estimate = problem.recover(&u, &mut muls);

        last_norm = u.iter().try_fold(0.0f64, |a, v| v.is_finite().then(|| a.max(v.abs()))).unwrap_or(f64::INFINITY);
        if last_norm > opts.divergence_threshold {
            verdict = Verdict::Diverged;
            mse_trace.push(f64::INFINITY);
            mul_trace.push(muls.get());
            break;
        }
        mse_trace.push(mse(&estimate, &obs.x_true)?);
        mul_trace.push(muls.get());
        if stop.converged(&estimate) {
            verdict = Verdict::Converged;
            break;
        }
    }
    Ok(DetectionReport {
        posterior_mean: estimate,
        posterior_var: Vec::new(),
        extrinsic_mean: Vec::new(),
        extrinsic_var: Vec::new(),
        mse_trace,
        mul_trace,
        verdict,
        mul_count: muls.get(),
        last_message_norm: last_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmmse::lmmse_detect;
    use crate::model::{generate_instance, PriorMode, SystemConfig};
    use nalgebra::DMatrix;

    #[test]
    fn zero_operator_returns_offset() {
        let b = DMatrix::<f64>::zeros(3, 3);
        let c = [1.0, -2.0, 0.5];
        let out = classical_iterate(&b, &c, &ClassicalOptions::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Converged);
        assert_eq!(out.solution, c);
        assert_eq!(out.trace[1], 0.0);
    }

    #[test]
    fn half_identity_sums_geometric_series() {
        let b = DMatrix::<f64>::identity(4, 4) * 0.5;
        let out = classical_iterate(&b, &[1.0; 4], &ClassicalOptions::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Converged);
        assert!(out.solution.iter().all(|v| (v - 2.0).abs() < 1e-9));
    }

    #[test]
    fn expanding_operator_diverges() {
        let b = DMatrix::<f64>::identity(2, 2) * 1.5;
        let out =
            classical_iterate(&b, &[1.0, 1.0], &ClassicalOptions { max_iters: 10_000, ..Default::default() }).unwrap();
        assert_eq!(out.verdict, Verdict::Diverged);
    }

    #[test]
    fn richardson_matches_direct_solve() {
        let cfg = SystemConfig::symmetric(8, 4, 0.2, 1.0, 5).with_prior_mode(PriorMode::GenieNoisy);
        let (ch, obs, prior) = generate_instance(&cfg).unwrap();
        let p = StationaryProblem::new(StationaryScheme::Richardson, &ch, &obs, &prior, cfg.noise_var).unwrap();
        let opts = ClassicalOptions { max_iters: 100_000, tol: 1e-14, ..Default::default() };
        let out = classical_iterate(&p.b, &p.c, &opts).unwrap();
        assert_eq!(out.verdict, Verdict::Converged);

        let m = materialize(&p.b.m);
        let rhs: Vec<f64> = p.c.iter().map(|c| c / p.b.p[0]).collect();
        let direct = m.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(rhs));
        for (a, b) in out.solution.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-8 * direct.amax(), "{a} vs {b}");
        }
        let x = p.recover(&out.solution, &mut MulCounter::new());
        let lm = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
        for (a, b) in x.iter().zip(&lm.posterior_mean) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobi_converges_when_heavily_overloaded() {
        let cfg = SystemConfig::symmetric(400, 40, 0.1, 1.0, 8);
        let (ch, obs, prior) = generate_instance(&cfg).unwrap();
        let opts = IterationOptions::default().with_tol(1e-12).with_max_iters(2000);
        let r = classical_detect(StationaryScheme::Jacobi, &ch, &obs, &prior, cfg.noise_var, &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Converged);
        let lm = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
        for (a, b) in r.posterior_mean.iter().zip(&lm.posterior_mean) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobi_diverges_near_square() {
        let cfg = SystemConfig::symmetric(500, 350, 1e-3, 1.0, 8);
        let (ch, obs, prior) = generate_instance(&cfg).unwrap();
        let opts = IterationOptions::default().with_max_iters(2000);
        let r = classical_detect(StationaryScheme::Jacobi, &ch, &obs, &prior, cfg.noise_var, &opts).unwrap();
        assert_eq!(r.verdict, Verdict::Diverged);
    }
}
