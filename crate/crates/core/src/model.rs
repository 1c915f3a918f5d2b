//! The linear system `y = H x + n`, seeded instance generation and the
//! Gaussian message algebra shared by every detector.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the emulated decoder feedback (the prior mean) is produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Prior mean is zero; meaningful when the prior variance equals the
    /// source variance.
    #[default]
    Uninformative,
    /// Prior mean is `x_true + e` with `e ~ N(0, prior_var)`, i.e. decoder
    /// feedback whose quality matches the stated variance.
    GenieNoisy,
}

/// Ground-truth parameters of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_users: usize,
    pub n_antennas: usize,
    /// Noise variance, linear scale. Zero is accepted for generation only.
    pub noise_var: f64,
    /// Per-user prior variance, length `n_users`.
    pub prior_var: Vec<f64>,
    pub source_var: f64,
    pub prior_mode: PriorMode,
    pub seed: u64,
}

impl SystemConfig {
    /// Configuration with the same prior variance for every user.
    pub fn symmetric(n_users: usize, n_antennas: usize, noise_var: f64, prior_var: f64, seed: u64) -> Self {
        Self {
            n_users,
            n_antennas,
            noise_var,
            prior_var: vec![prior_var; n_users],
            source_var: 1.0,
            prior_mode: PriorMode::Uninformative,
            seed,
        }
    }

    pub fn with_prior_mode(mut self, mode: PriorMode) -> Self {
        self.prior_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_antennas == 0 {
            return Err(Error::InvalidConfig("n_users and n_antennas must be >= 1".into()));
        }
        if self.n_users.checked_mul(self.n_antennas).is_none() {
            return Err(Error::InvalidConfig("channel dimensions overflow".into()));
        }
        if self.prior_var.len() != self.n_users {
            return Err(Error::DimensionMismatch {
                what: "prior_var length",
                expected: self.n_users,
                actual: self.prior_var.len(),
            });
        }
        if !(self.noise_var >= 0.0 && self.noise_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_var must be finite and >= 0, got {}", self.noise_var)));
        }
        if !(self.source_var > 0.0 && self.source_var.is_finite()) {
            return Err(Error::InvalidConfig(format!("source_var must be finite and > 0, got {}", self.source_var)));
        }
        if let Some(v) = self.prior_var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("prior variances must be finite and > 0, got {v}")));
        }
        Ok(())
    }

    /// `β = N_u / N_r`.
    pub fn load_factor(&self) -> f64 {
        self.n_users as f64 / self.n_antennas as f64
    }

    /// The common prior variance, or [`Error::AsymmetricPrior`].
    pub fn symmetric_prior_var(&self) -> Result<f64> {
        symmetric_value(&self.prior_var).ok_or(Error::AsymmetricPrior)
    }

    /// Prior signal-to-noise ratio `v̄ / σ_n²`.
    pub fn prior_snr(&self) -> Result<f64> {
        Ok(self.symmetric_prior_var()? / self.noise_var)
    }
}

fn symmetric_value(v: &[f64]) -> Option<f64> {
    let first = *v.first()?;
    v.iter().all(|x| *x == first).then_some(first)
}

/// One channel realization with its cached row energies.
#[derive(Debug, Clone)]
pub struct ChannelInstance {
    /// `N_r × N_u`, column `k` holds user `k`'s signature.
    pub h: DMatrix<f64>,
    /// `d_m = Σ_k h_mk²`, the diagonal of `H Hᵀ`.
    pub gram_diag: Vec<f64>,
}

impl ChannelInstance {
    pub fn new(h: DMatrix<f64>) -> Self {
        let mut gram_diag = vec![0.0; h.nrows()];
        for col in h.column_iter() {
            for (d, v) in gram_diag.iter_mut().zip(col.iter()) {
                *d += v * v;
            }
        }
        Self { h, gram_diag }
    }

    pub fn n_users(&self) -> usize {
        self.h.ncols()
    }

    pub fn n_antennas(&self) -> usize {
        self.h.nrows()
    }

    /// Column `k` of `H` as a contiguous slice.
    #[inline]
    pub fn column(&self, k: usize) -> &[f64] {
        let nr = self.h.nrows();
        &self.h.as_slice()[k * nr..(k + 1) * nr]
    }

    /// `H x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_antennas()];
        for (k, xk) in x.iter().enumerate() {
            for (o, h) in out.iter_mut().zip(self.column(k)) {
                *o += h * xk;
            }
        }
        out
    }

    /// `Hᵀ z`.
    pub fn apply_transpose(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n_users()).map(|k| self.column(k).iter().zip(z).map(|(h, v)| h * v).sum()).collect()
    }
}

/// Per-user Gaussian prior: the emulated decoder feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBelief {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PriorBelief {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                what: "prior mean/variance",
                expected: mean.len(),
                actual: var.len(),
            });
        }
        if var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("prior variances must be finite and > 0".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn symmetric_var(&self) -> Option<f64> {
        symmetric_value(&self.var)
    }
}

/// Received vector plus the transmitted symbols (kept for scoring only).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: Vec<f64>,
    pub x_true: Vec<f64>,
}

/// A scalar Gaussian in information form. Precision `0` is infinite variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMessage {
    pub mean: f64,
    pub precision: f64,
}

impl GaussianMessage {
    pub fn from_mean_var(mean: f64, var: f64) -> Self {
        Self { mean, precision: 1.0 / var }
    }

    /// The uninformative message.
    pub fn flat() -> Self {
        Self { mean: 0.0, precision: 0.0 }
    }

    pub fn variance(&self) -> f64 {
        if self.precision == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.precision
        }
    }

    /// Gaussian product (combining two independent beliefs).
    pub fn product(&self, other: &Self) -> Self {
        let precision = self.precision + other.precision;
        if precision == 0.0 {
            return Self::flat();
        }
        let mean = (self.mean * self.precision + other.mean * other.precision) / precision;
        Self { mean, precision }
    }
}

/// Removes the prior's contribution from a posterior:
/// `1/v_e = 1/v̂ − 1/v_l` and `x_e/v_e = x̂/v̂ − x_l/v_l`.
pub fn combine_extrinsic(posterior: GaussianMessage, prior: GaussianMessage) -> Result<GaussianMessage> {
    let finite = |m: &GaussianMessage| m.precision.is_finite() && m.precision >= 0.0 && m.mean.is_finite();
    if !finite(&posterior) || !finite(&prior) {
        return Err(Error::NumericalFault("non-finite message in extrinsic combination".into()));
    }
    if posterior.precision <= prior.precision {
        return Err(Error::NonInformative { posterior: posterior.precision, prior: prior.precision });
    }
    let precision = posterior.precision - prior.precision;
    let mean = (posterior.mean * posterior.precision - prior.mean * prior.precision) / precision;
    Ok(GaussianMessage { mean, precision })
}

/// Mean squared error `(1/N) Σ (a_k − b_k)²`.
pub fn mse(estimate: &[f64], x_true: &[f64]) -> Result<f64> {
    if estimate.len() != x_true.len() {
        return Err(Error::DimensionMismatch { what: "mse operands", expected: x_true.len(), actual: estimate.len() });
    }
    if estimate.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = estimate.iter().zip(x_true).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / estimate.len() as f64)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for trial `trial_id` of an experiment seeded with `seed`:
/// `mix64(seed ^ mix64(trial_id))`. Independent of execution order.
pub fn trial_seed(seed: u64, trial_id: u64) -> u64 {
    mix64(seed ^ mix64(trial_id))
}

/// Draws `(H, y, x_true, prior)` from `cfg` using `cfg.seed`.
pub fn generate_instance(cfg: &SystemConfig) -> Result<(ChannelInstance, Observation, PriorBelief)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_instance_with(cfg, &mut rng)
}

/// Draws an instance from an explicit RNG state.
///
/// Draw order is fixed: `H` column by column, then `x_true`, noise, and the
/// prior perturbation (genie mode only).
pub fn generate_instance_with<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<(ChannelInstance, Observation, PriorBelief)> {
    cfg.validate()?;
    let (nu, nr) = (cfg.n_users, cfg.n_antennas);
    let channel = loop {
        let h = DMatrix::from_iterator(nr, nu, (0..nr * nu).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let ch = ChannelInstance::new(h);
        // An all-zero row has probability zero; redraw rather than carry it.
        if ch.gram_diag.iter().all(|d| *d > 0.0) {
            break ch;
        }
    };

    let sx = cfg.source_var.sqrt();
    let x_true: Vec<f64> = (0..nu).map(|_| sx * rng.sample::<f64, _>(StandardNormal)).collect();
    let sn = cfg.noise_var.sqrt();
    let mut y = channel.apply(&x_true);
    for v in y.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        if sn > 0.0 {
            *v += sn * n;
        }
    }

    let mean = match cfg.prior_mode {
        PriorMode::Uninformative => vec![0.0; nu],
        PriorMode::GenieNoisy => x_true
            .iter()
            .zip(&cfg.prior_var)
            .map(|(x, v)| x + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    let prior = PriorBelief::new(mean, cfg.prior_var.clone())?;
    Ok((channel, Observation { y, x_true }, prior))
}
