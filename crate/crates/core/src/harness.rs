//! Seeded Monte-Carlo experiments, analysis-only predictions and CSV output.
//!
//! Trial `t` of an experiment with seed `s` draws its instance from
//! `ChaCha8Rng::seed_from_u64(trial_seed(s, t))`, where `trial_seed`
//! applies the SplitMix64 finalizer twice (see [`crate::model::mix64`]).
//! Every prior variance of the sweep reuses the trial's channel, symbols
//! and noise, so sweeps compare detectors on identical draws. Records are
//! sorted before writing, which makes serial and parallel runs produce the
//! same bytes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Deserialize;

use crate::analysis::classical::{classical_detect, StationaryScheme};
use crate::analysis::spectral::OffDiagonalGram;
use crate::analysis::{
    asymptotic_relaxation, beta_threshold_met, gamma_tilde, gmpid_iteration_operator, gram_spectral_radius,
    rho_gmpid_asymptotic, rho_sa_asymptotic, sa_iteration_operator, solve_variance_fixed_point,
};
use crate::error::{Error, Result};
use crate::gmpid::{gmpid_run, DetectionReport, IterationOptions, Verdict};
use crate::lmmse::{lmmse_detect, predict_mmse_mse};
use crate::model::{generate_instance, mse, trial_seed, PriorMode, SystemConfig};
use crate::sagmpid::{choose_relaxation, sa_gmpid_run, RelaxationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Lmmse,
    Gmpid,
    SaGmpid,
    Jacobi,
    Richardson,
}

impl Detector {
    pub const ALL: [Detector; 5] = [Self::Lmmse, Self::Gmpid, Self::SaGmpid, Self::Jacobi, Self::Richardson];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lmmse => "lmmse",
            Self::Gmpid => "gmpid",
            Self::SaGmpid => "sa_gmpid",
            Self::Jacobi => "jacobi",
            Self::Richardson => "richardson",
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.as_str() == s.trim())
            .ok_or_else(|| Error::UnknownDetector(s.trim().to_string()))
    }
}

/// Parses a comma-separated detector list such as `lmmse,sa_gmpid`.
pub fn parse_detector_list(s: &str) -> Result<Vec<Detector>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxationSetting {
    #[default]
    Asymptotic,
    ExactEigen,
    /// Uses `relaxation_w`.
    Manual,
}

fn default_source_var() -> f64 {
    1.0
}

fn default_trials() -> usize {
    1
}

fn default_max_iters() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-8
}

fn default_output() -> PathBuf {
    PathBuf::from("results.csv")
}

/// One experiment, read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub detectors: Vec<Detector>,
    pub n_users: usize,
    pub n_antennas: usize,
    /// Required: no default noise level is assumed.
    pub noise_var: f64,
    #[serde(default = "default_source_var")]
    pub source_var: f64,
    #[serde(default)]
    pub prior_mode: PriorMode,
    #[serde(default)]
    pub seed: u64,
    pub prior_var_sweep: Vec<f64>,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub relaxation: RelaxationSetting,
    pub relaxation_w: Option<f64>,
    #[serde(default = "default_output")]
    pub output_path: PathBuf,
    /// Load factors for `sweep`; `n_antennas = round(n_users / β)`.
    #[serde(default)]
    pub sweep_betas: Vec<f64>,
    /// Prior SNRs `v̄/σ²` in dB for `sweep`.
    #[serde(default)]
    pub sweep_snr_db: Vec<f64>,
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.detectors.is_empty() {
            return bad("detectors must not be empty".into());
        }
        if self.n_trials == 0 {
            return bad("n_trials must be >= 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if self.prior_var_sweep.is_empty() {
            return bad("prior_var_sweep must not be empty".into());
        }
        if let Some(v) = self.prior_var_sweep.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return bad(format!("prior_var_sweep values must be > 0, got {v}"));
        }
        if let Some(v) = self.sweep_betas.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return bad(format!("sweep_betas values must be > 0, got {v}"));
        }
        if self.sweep_snr_db.iter().any(|v| !v.is_finite()) {
            return bad("sweep_snr_db values must be finite".into());
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return bad(format!("noise_var must be > 0, got {}", self.noise_var));
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0".into());
        }
        if self.relaxation == RelaxationSetting::Manual && self.relaxation_w.is_none() {
            return bad("relaxation = \"manual\" needs relaxation_w".into());
        }
        self.config(self.prior_var_sweep[0], 0)?.validate()
    }

    /// System configuration for one prior variance and seed.
    pub fn config(&self, prior_var: f64, seed: u64) -> Result<SystemConfig> {
        let mut cfg = SystemConfig::symmetric(self.n_users, self.n_antennas, self.noise_var, prior_var, seed)
            .with_prior_mode(self.prior_mode);
        cfg.source_var = self.source_var;
        cfg.validate()?;
        Ok(cfg)
    }

    fn relaxation_mode(&self) -> RelaxationMode {
        match self.relaxation {
            RelaxationSetting::Asymptotic => RelaxationMode::Asymptotic,
            RelaxationSetting::ExactEigen => RelaxationMode::ExactEigen,
            RelaxationSetting::Manual => RelaxationMode::Manual(self.relaxation_w.unwrap_or(f64::NAN)),
        }
    }

    fn iteration_options(&self) -> IterationOptions {
        IterationOptions::default().with_max_iters(self.max_iters).with_tol(self.tol)
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub detector: Detector,
    pub prior_var: f64,
    /// 0 for LMMSE, otherwise 1-based.
    pub iteration: usize,
    pub mse: f64,
    pub mul_count_cumulative: u64,
    /// Final verdict of the run, repeated on each of its rows.
    pub verdict: Verdict,
}

pub const CSV_HEADER: [&str; 7] =
    ["trial_id", "detector", "prior_var", "iteration", "mse", "mul_count_cumulative", "verdict"];

fn sort_key(a: &TrialRecord, b: &TrialRecord) -> std::cmp::Ordering {
    a.trial_id
        .cmp(&b.trial_id)
        .then(a.detector.cmp(&b.detector))
        .then(a.prior_var.total_cmp(&b.prior_var))
        .then(a.iteration.cmp(&b.iteration))
}

/// Floats with 17 significant digits, so the text round-trips exactly.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv<W: Write>(records: &[TrialRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.trial_id.to_string(),
            r.detector.to_string(),
            fmt_float(r.prior_var),
            r.iteration.to_string(),
            fmt_float(r.mse),
            r.mul_count_cumulative.to_string(),
            r.verdict.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(records: &[TrialRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(records, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

/// Analysis-only figures for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub n_users: usize,
    pub n_antennas: usize,
    pub prior_var: f64,
    pub noise_var: f64,
    pub v_hat_mmse: f64,
    pub v_hat: f64,
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub w_star: f64,
    pub rho_gmpid_asymptotic: f64,
    pub rho_sa_asymptotic: f64,
    pub beta_threshold_met: bool,
}

impl Prediction {
    pub fn for_config(cfg: &SystemConfig) -> Result<Self> {
        let beta = cfg.load_factor();
        if beta <= 1.0 {
            return Err(Error::NotOverloaded { beta });
        }
        let sol = solve_variance_fixed_point(cfg)?;
        Ok(Self {
            n_users: cfg.n_users,
            n_antennas: cfg.n_antennas,
            prior_var: cfg.symmetric_prior_var()?,
            noise_var: cfg.noise_var,
            v_hat_mmse: predict_mmse_mse(cfg)?,
            v_hat: sol.v_hat,
            gamma: sol.gamma,
            gamma_tilde: gamma_tilde(cfg)?,
            w_star: asymptotic_relaxation(cfg)?,
            rho_gmpid_asymptotic: rho_gmpid_asymptotic(cfg)?,
            rho_sa_asymptotic: rho_sa_asymptotic(cfg)?,
            beta_threshold_met: beta_threshold_met(beta),
        })
    }

    pub fn load_factor(&self) -> f64 {
        self.n_users as f64 / self.n_antennas as f64
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} (beta {:.4}) prior_var {:e} noise_var {:e}: mmse {:.6e}  v_hat {:.6e}  gamma {:.6e}  gamma_tilde {:.6e}  w* {:.6}  rho_gmpid {:.4}  rho_sa {:.4}  beta>3+2sqrt2 {}",
            self.n_users,
            self.n_antennas,
            self.load_factor(),
            self.prior_var,
            self.noise_var,
            self.v_hat_mmse,
            self.v_hat,
            self.gamma,
            self.gamma_tilde,
            self.w_star,
            self.rho_gmpid_asymptotic,
            self.rho_sa_asymptotic,
            self.beta_threshold_met,
        )
    }
}

/// Predictions for each prior variance of the spec.
pub fn predict(spec: &ExperimentSpec) -> Result<Vec<Prediction>> {
    spec.validate()?;
    spec.prior_var_sweep.iter().map(|v| Prediction::for_config(&spec.config(*v, spec.seed)?)).collect()
}

/// Aggregate of one (detector, prior variance) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub detector: Detector,
    pub prior_var: f64,
    /// Mean MSE per iteration over trials; a run that stopped early
    /// contributes its final MSE to later iterations.
    pub mean_mse: Vec<f64>,
    pub mean_final_mse: f64,
    pub mean_final_muls: f64,
    pub converged: usize,
    pub max_iterations: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub name: String,
    pub n_trials: usize,
    pub predictions: Vec<Prediction>,
    pub cells: Vec<SummaryCell>,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment {} ({} trials)", self.name, self.n_trials)?;
        for p in &self.predictions {
            writeln!(f, "prediction  {p}")?;
        }
        writeln!(
            f,
            "{:<11} {:>12} {:>14} {:>14}  converged/max/diverged",
            "detector", "prior_var", "final_mse", "final_muls"
        )?;
        for c in &self.cells {
            writeln!(
                f,
                "{:<11} {:>12.4e} {:>14.6e} {:>14.0}  {}/{}/{}",
                c.detector.as_str(),
                c.prior_var,
                c.mean_final_mse,
                c.mean_final_muls,
                c.converged,
                c.max_iterations,
                c.diverged
            )?;
        }
        for c in self.cells.iter().filter(|c| c.mean_mse.len() > 1) {
            let trace: Vec<String> = c.mean_mse.iter().take(10).map(|v| format!("{v:.4e}")).collect();
            let more = if c.mean_mse.len() > 10 { " ..." } else { "" };
            writeln!(f, "mse by iteration {} prior_var {:e}: {}{more}", c.detector, c.prior_var, trace.join(" "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<TrialRecord>,
    pub summary: Summary,
}

fn records_from_report(trial_id: u64, detector: Detector, prior_var: f64, r: &DetectionReport) -> Vec<TrialRecord> {
    r.mse_trace
        .iter()
        .zip(&r.mul_trace)
        .enumerate()
        .map(|(i, (m, c))| TrialRecord {
            trial_id,
            detector,
            prior_var,
            iteration: i + 1,
            mse: *m,
            mul_count_cumulative: *c,
            verdict: r.verdict,
        })
        .collect()
}

/// Runs every detector on one trial across the prior-variance sweep.
pub fn run_trial(spec: &ExperimentSpec, trial_id: u64) -> Result<Vec<TrialRecord>> {
    let seed = trial_seed(spec.seed, trial_id);
    let opts = spec.iteration_options();
    let mut out = Vec::new();
    for &prior_var in &spec.prior_var_sweep {
        let cfg = spec.config(prior_var, seed)?;
        let (ch, obs, prior) = generate_instance(&cfg)?;
        for &det in &spec.detectors {
            let s2 = cfg.noise_var;
            match det {
                Detector::Lmmse => {
                    let r = lmmse_detect(&ch, &obs, &prior, s2)?;
                    out.push(TrialRecord {
                        trial_id,
                        detector: det,
                        prior_var,
                        iteration: 0,
                        mse: mse(&r.posterior_mean, &obs.x_true)?,
                        mul_count_cumulative: r.mul_count,
                        verdict: Verdict::Converged,
                    });
                }
                Detector::Gmpid => {
                    let r = gmpid_run(&ch, &obs, &prior, s2, &opts)?;
                    out.extend(records_from_report(trial_id, det, prior_var, &r));
                }
                Detector::SaGmpid => {
                    let relax = choose_relaxation(&ch, &cfg, spec.relaxation_mode())?;
                    let r = sa_gmpid_run(&ch, &obs, &prior, s2, &relax, &opts)?;
                    out.extend(records_from_report(trial_id, det, prior_var, &r));
                }
                Detector::Jacobi | Detector::Richardson => {
                    let scheme =
                        if det == Detector::Jacobi { StationaryScheme::Jacobi } else { StationaryScheme::Richardson };
                    let r = classical_detect(scheme, &ch, &obs, &prior, s2, &opts)?;
                    out.extend(records_from_report(trial_id, det, prior_var, &r));
                }
            }
        }
    }
    Ok(out)
}

/// Runs all trials and returns sorted records with their summary.
pub fn run_experiment(spec: &ExperimentSpec, execution: Execution) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let ids = 0..spec.n_trials as u64;
    let per_trial: Vec<Result<Vec<TrialRecord>>> = match execution {
        Execution::Serial => ids.map(|t| run_trial(spec, t)).collect(),
        Execution::Parallel => ids.into_par_iter().map(|t| run_trial(spec, t)).collect(),
    };
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    records.sort_by(sort_key);
    let summary = summarize(spec, &records)?;
    Ok(ExperimentOutcome { records, summary })
}

/// Runs the experiment and writes its CSV to `path`.
pub fn run_to_file(spec: &ExperimentSpec, execution: Execution, path: &Path) -> Result<Summary> {
    let outcome = run_experiment(spec, execution)?;
    write_csv_file(&outcome.records, path)?;
    Ok(outcome.summary)
}

fn last<'a>(run: &[&'a TrialRecord]) -> &'a TrialRecord {
    run.last().expect("runs are non-empty")
}

fn summarize(spec: &ExperimentSpec, records: &[TrialRecord]) -> Result<Summary> {
    let predictions = if spec.n_users > spec.n_antennas { predict(spec)? } else { Vec::new() };
    let mut cells = Vec::new();
    let mut detectors = spec.detectors.clone();
    detectors.sort();
    detectors.dedup();
    for &det in &detectors {
        for &pv in &spec.prior_var_sweep {
            let runs: Vec<Vec<&TrialRecord>> = (0..spec.n_trials as u64)
                .map(|t| records.iter().filter(|r| r.trial_id == t && r.detector == det && r.prior_var == pv).collect())
                .filter(|v: &Vec<&TrialRecord>| !v.is_empty())
                .collect();
            if runs.is_empty() {
                continue;
            }
            let len = runs.iter().map(Vec::len).max().unwrap_or(0);
            let n = runs.len() as f64;
            let mean_mse =
                (0..len).map(|i| runs.iter().map(|run| run[i.min(run.len() - 1)].mse).sum::<f64>() / n).collect();
            let count = |v: Verdict| runs.iter().filter(|run| last(run).verdict == v).count();
            cells.push(SummaryCell {
                detector: det,
                prior_var: pv,
                mean_mse,
                mean_final_mse: runs.iter().map(|run| last(run).mse).sum::<f64>() / n,
                mean_final_muls: runs.iter().map(|run| last(run).mul_count_cumulative as f64).sum::<f64>() / n,
                converged: count(Verdict::Converged),
                max_iterations: count(Verdict::MaxIterations),
                diverged: count(Verdict::Diverged),
            });
        }
    }
    Ok(Summary { name: spec.name.clone(), n_trials: spec.n_trials, predictions, cells })
}

/// One point of a (β, prior SNR) grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub snr_db: f64,
    pub prediction: Prediction,
    /// Means over the spec's trials of the measured radii; `None` when the
    /// sweep is analysis-only.
    pub rho_gmpid_empirical: Option<f64>,
    pub rho_sa_empirical: Option<f64>,
}

pub const SWEEP_HEADER: [&str; 13] = [
    "beta",
    "snr_db",
    "n_users",
    "n_antennas",
    "prior_var",
    "noise_var",
    "v_hat",
    "gamma",
    "w_star",
    "rho_gmpid_asymptotic",
    "rho_sa_asymptotic",
    "rho_gmpid_empirical",
    "rho_sa_empirical",
];

/// Grid over `sweep_betas × sweep_snr_db` at fixed `n_users` and the first
/// prior variance. With `measure`, each point also averages the measured
/// radii over `n_trials` channels.
pub fn sweep(spec: &ExperimentSpec, measure: bool) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if spec.sweep_betas.is_empty() || spec.sweep_snr_db.is_empty() {
        return Err(Error::Spec("sweep needs sweep_betas and sweep_snr_db".into()));
    }
    let prior_var = spec.prior_var_sweep[0];
    let mut grid = Vec::new();
    for &beta in &spec.sweep_betas {
        for &snr_db in &spec.sweep_snr_db {
            grid.push((beta, snr_db));
        }
    }
    grid.into_par_iter()
        .map(|(beta, snr_db)| {
            let n_antennas = ((spec.n_users as f64 / beta).round() as usize).max(1);
            let noise_var = prior_var / 10f64.powf(snr_db / 10.0);
            let mut cfg = SystemConfig::symmetric(spec.n_users, n_antennas, noise_var, prior_var, spec.seed)
                .with_prior_mode(spec.prior_mode);
            cfg.source_var = spec.source_var;
            let prediction = Prediction::for_config(&cfg)?;
            let (mut rho_gmpid_empirical, mut rho_sa_empirical) = (None, None);
            if measure {
                let (mut g, mut s) = (0.0, 0.0);
                for t in 0..spec.n_trials as u64 {
                    let (ch, _, _) = generate_instance(&cfg.clone().with_seed(trial_seed(spec.seed, t)))?;
                    g += radius(&gmpid_iteration_operator(&ch, prediction.gamma))?;
                    s += radius(&sa_iteration_operator(&ch, prediction.gamma_tilde, prediction.w_star))?;
                }
                rho_gmpid_empirical = Some(g / spec.n_trials as f64);
                rho_sa_empirical = Some(s / spec.n_trials as f64);
            }
            Ok(SweepRow { beta, snr_db, prediction, rho_gmpid_empirical, rho_sa_empirical })
        })
        .collect()
}

fn radius(op: &OffDiagonalGram<'_>) -> Result<f64> {
    gram_spectral_radius(op)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_HEADER)?;
    let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    for r in rows {
        let p = &r.prediction;
        w.write_record([
            fmt_float(r.beta),
            fmt_float(r.snr_db),
            p.n_users.to_string(),
            p.n_antennas.to_string(),
            fmt_float(p.prior_var),
            fmt_float(p.noise_var),
            fmt_float(p.v_hat),
            fmt_float(p.gamma),
            fmt_float(p.w_star),
            fmt_float(p.rho_gmpid_asymptotic),
            fmt_float(p.rho_sa_asymptotic),
            opt(r.rho_gmpid_empirical),
            opt(r.rho_sa_empirical),
        ])?;
    }
    w.flush()?;
    Ok(())
}
