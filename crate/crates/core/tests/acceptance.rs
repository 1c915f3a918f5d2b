//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Every criterion runs even when an earlier one fails.

use std::time::{Duration, Instant};

use gmpid_core::analysis::spectral::OffDiagonalGram;
use gmpid_core::analysis::{
    asymptotic_relaxation, gamma_tilde, gmpid_finite_fixed_point, gmpid_iteration_operator, gmpid_limit_formula,
    gram_spectral_radius, rho_gmpid_asymptotic, rho_sa_asymptotic, sa_iteration_operator, solve_variance_fixed_point,
};
use gmpid_core::gmpid::{gmpid_run, solve_message_variances, IterationOptions, Verdict};
use gmpid_core::harness::{run_to_file, Detector, Execution, ExperimentSpec};
use gmpid_core::lmmse::{lmmse_detect, predict_mmse_mse};
use gmpid_core::model::{
    generate_instance, mse, trial_seed, ChannelInstance, Observation, PriorBelief, PriorMode, SystemConfig,
};
use gmpid_core::sagmpid::{choose_relaxation, sa_gmpid_run, sa_gmpid_run_observed, RelaxationMode};
use rayon::prelude::*;

const C1_REL_TOL: f64 = 1e-9;
const C1_BUDGET: Duration = Duration::from_secs(1);
const C2_REL_TOL: f64 = 0.05;
const C2_BUDGET: Duration = Duration::from_secs(30);
const C3_REL_TOL: f64 = 1e-6;
const C4_STRICT_FRACTION: f64 = 0.95;
const C5_REL_TOL: f64 = 1e-6;
const C5_BUDGET: Duration = Duration::from_secs(120);
const C6_RATE_SLACK: f64 = 0.05;
const C7_REL_TOL: f64 = 0.10;
const C8_GMPID_DIVERGED_FRACTION: f64 = 0.90;
const C9_REL_TOL: f64 = 0.05;
const C10_COST_RANGE: (f64, f64) = (3.0, 6.0);
const C10_SLOPE_RANGE: (f64, f64) = (2.7, 3.3);

/// Prior-aware quality setting used where GMPID must converge at β = 4:
/// decoder feedback of variance 0.01 against noise variance 2.
const CONVERGENT_PRIOR_VAR: f64 = 0.01;
const CONVERGENT_NOISE_VAR: f64 = 2.0;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn draw(cfg: &SystemConfig, base: u64, t: u64) -> (ChannelInstance, Observation, PriorBelief) {
    generate_instance(&cfg.clone().with_seed(trial_seed(base, t))).expect("valid config")
}

fn c1_variance_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let nr = 1000usize;
    for i in 0..10 {
        let beta = 1.1 * (16.0f64 / 1.1).powf(i as f64 / 9.0);
        for j in 0..10 {
            let snr = 0.01 * 10f64.powf(4.0 * j as f64 / 9.0);
            let nu = (beta * nr as f64).round() as usize;
            let cfg = SystemConfig::symmetric(nu, nr, 1.0 / snr, 1.0, 0);
            let a = solve_variance_fixed_point(&cfg).unwrap().v_hat;
            let b = predict_mmse_mse(&cfg).unwrap();
            worst = worst.max((a - b).abs() / b);
        }
    }
    let took = start.elapsed();
    outcome(
        worst <= C1_REL_TOL && took < C1_BUDGET,
        format!("max rel diff {worst:.2e} over 10x10 grid (tol {C1_REL_TOL:e}), {took:.2?}"),
    )
}

fn c2_variance_convergence() -> Outcome {
    let start = Instant::now();
    let cfg = SystemConfig::symmetric(400, 100, 0.1, 1.0, 0);
    let opts = IterationOptions::default();
    let per: Vec<(f64, bool)> = (0..20u64)
        .into_par_iter()
        .map(|t| {
            let (ch, _, prior) = draw(&cfg, 0xC2, t);
            let fp = solve_message_variances(&ch, &prior, cfg.noise_var, opts.variance_tol, opts.variance_max_iters)
                .unwrap();
            let v = fp.decision_var(&ch, &prior);
            (v.iter().sum::<f64>() / v.len() as f64, fp.converged)
        })
        .collect();
    let mean = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    let all_converged = per.iter().all(|p| p.1);
    let root = solve_variance_fixed_point(&cfg).unwrap().v_hat;
    let rel = (mean - root).abs() / root;
    let took = start.elapsed();
    outcome(
        rel <= C2_REL_TOL && all_converged && took < C2_BUDGET,
        format!("mean decision variance {mean:.6} vs root {root:.6} (rel {rel:.2e}) over 20 channels, variance loops converged: {all_converged}, {took:.2?}"),
    )
}

/// One convergent-GMPID trial: what criteria 3 and 4 need.
struct GmpidTrial {
    converged: bool,
    limit_rel: f64,
    finite_rel: f64,
    mse_gmpid: f64,
    mse_lmmse: f64,
}

fn gmpid_trial(cfg: &SystemConfig, base: u64, t: u64) -> GmpidTrial {
    let (ch, obs, prior) = draw(cfg, base, t);
    let opts = IterationOptions::default().with_tol(1e-12).with_max_iters(5000);
    let r = gmpid_run(&ch, &obs, &prior, cfg.noise_var, &opts).unwrap();
    let limit = gmpid_limit_formula(&ch, &obs, &prior, cfg).unwrap();
    let fp = solve_message_variances(&ch, &prior, cfg.noise_var, opts.variance_tol, opts.variance_max_iters).unwrap();
    let finite = gmpid_finite_fixed_point(&ch, &obs, &prior, &fp).unwrap();
    let lm = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
    GmpidTrial {
        converged: r.verdict == Verdict::Converged,
        limit_rel: max_rel(&r.posterior_mean, &limit),
        finite_rel: max_rel(&r.posterior_mean, &finite),
        mse_gmpid: mse(&r.posterior_mean, &obs.x_true).unwrap(),
        mse_lmmse: mse(&lm.posterior_mean, &obs.x_true).unwrap(),
    }
}

fn convergent_beta4_trials() -> Vec<GmpidTrial> {
    let cfg = SystemConfig::symmetric(400, 100, CONVERGENT_NOISE_VAR, CONVERGENT_PRIOR_VAR, 0)
        .with_prior_mode(PriorMode::GenieNoisy);
    (0..20u64).into_par_iter().map(|t| gmpid_trial(&cfg, 0xC4, t)).collect()
}

fn c3_gmpid_fixed_point(beta4: &[GmpidTrial]) -> Outcome {
    // Every convergent GMPID run of the suite: the β = 4 trials plus a
    // β = 8 set where the sufficient condition holds at the default SNR.
    let cfg8 = SystemConfig::symmetric(400, 50, 0.1, 1.0, 0);
    let beta8: Vec<GmpidTrial> = (0..10u64).into_par_iter().map(|t| gmpid_trial(&cfg8, 0xC3, t)).collect();
    let conv: Vec<&GmpidTrial> = beta4.iter().chain(&beta8).filter(|t| t.converged).collect();
    let worst = conv.iter().map(|t| t.limit_rel).fold(0.0, f64::max);
    let finite = conv.iter().map(|t| t.finite_rel).fold(0.0, f64::max);
    outcome(
        !conv.is_empty() && worst <= C3_REL_TOL,
        format!(
            "{} convergent runs: max rel diff to the large-system limit {worst:.2e} (tol {C3_REL_TOL:e}); to the exact finite-size fixed point {finite:.2e}",
            conv.len()
        ),
    )
}

fn c4_gmpid_suboptimal(trials: &[GmpidTrial]) -> Outcome {
    let conv: Vec<&GmpidTrial> = trials.iter().filter(|t| t.converged).collect();
    let not_worse = conv.iter().all(|t| t.mse_gmpid >= t.mse_lmmse);
    let strict = conv.iter().filter(|t| t.mse_gmpid > t.mse_lmmse).count();
    let frac = if conv.is_empty() { 0.0 } else { strict as f64 / conv.len() as f64 };
    let min_gap = conv.iter().map(|t| t.mse_gmpid / t.mse_lmmse - 1.0).fold(f64::INFINITY, f64::min);
    outcome(
        !conv.is_empty() && not_worse && frac >= C4_STRICT_FRACTION,
        format!(
            "{}/{} trials converged (400x100, prior_var {CONVERGENT_PRIOR_VAR}, noise_var {CONVERGENT_NOISE_VAR}); strictly worse than LMMSE on {strict}, min relative gap {min_gap:.3e}",
            conv.len(),
            trials.len()
        ),
    )
}

fn c5_sa_matches_lmmse() -> Outcome {
    let start = Instant::now();
    let betas = [1.2, 10.0 / 7.0, 2.0, 4.0, 8.0];
    let mut cells = Vec::new();
    for nu in [100usize, 400] {
        for (bi, beta) in betas.iter().enumerate() {
            for t in 0..3u64 {
                cells.push((nu, bi, *beta, t));
            }
        }
    }
    let res: Vec<(String, bool, f64)> = cells
        .into_par_iter()
        .map(|(nu, bi, beta, t)| {
            let nr = (nu as f64 / beta).round() as usize;
            let cfg = SystemConfig::symmetric(nu, nr, 0.1, 1.0, 0);
            let (ch, obs, prior) = draw(&cfg, 0xC5 + 16 * bi as u64 + nu as u64, t);
            let relax = choose_relaxation(&ch, &cfg, RelaxationMode::Asymptotic).unwrap();
            let opts = IterationOptions::default().with_tol(1e-11).with_max_iters(20_000);
            let r = sa_gmpid_run(&ch, &obs, &prior, cfg.noise_var, &relax, &opts).unwrap();
            let lm = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
            let rel = max_rel(&r.posterior_mean, &lm.posterior_mean);
            (format!("{nu}x{nr}#{t}"), r.verdict == Verdict::Converged, rel)
        })
        .collect();
    let failed: Vec<&String> = res.iter().filter(|r| !(r.1 && r.2 <= C5_REL_TOL)).map(|r| &r.0).collect();
    let worst = res.iter().filter(|r| r.1).map(|r| r.2).fold(0.0, f64::max);
    let took = start.elapsed();
    outcome(
        failed.is_empty() && took < C5_BUDGET,
        format!(
            "{} runs over beta {{1.2, 10/7, 2, 4, 8}} x N_u {{100, 400}}: max rel diff {worst:.2e} (tol {C5_REL_TOL:e}), failing {:?}, {took:.2?}",
            res.len(),
            failed
        ),
    )
}

fn radius(op: &OffDiagonalGram<'_>) -> f64 {
    gram_spectral_radius(op).expect("spectral radius")
}

/// Geometric decay rate of `‖x̂(τ) − x̂_LMMSE‖` while the relative error
/// lies in `(1e-9, 1e-2)`.
fn decay_rate(errors: &[f64]) -> Option<f64> {
    let idx: Vec<usize> = (0..errors.len()).filter(|i| errors[*i] > 1e-9 && errors[*i] < 1e-2).collect();
    let (first, last) = (*idx.first()?, *idx.last()?);
    (last > first + 2).then(|| (errors[last] / errors[first]).powf(1.0 / (last - first) as f64))
}

fn c6_radius_ordering() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (bi, beta) in [2.0f64, 4.0, 8.0].into_iter().enumerate() {
        let nu = 400usize;
        let nr = (nu as f64 / beta).round() as usize;
        let cfg = SystemConfig::symmetric(nu, nr, 0.1, 1.0, 0);
        let gamma = solve_variance_fixed_point(&cfg).unwrap().gamma;
        let gt = gamma_tilde(&cfg).unwrap();
        let w = asymptotic_relaxation(&cfg).unwrap();
        let per: Vec<(f64, f64, Option<f64>)> = (0..20u64)
            .into_par_iter()
            .map(|t| {
                let (ch, obs, prior) = draw(&cfg, 0xC6 + bi as u64, t);
                let rg = radius(&gmpid_iteration_operator(&ch, gamma));
                let rs = radius(&sa_iteration_operator(&ch, gt, w));
                let lm = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
                let norm = lm.posterior_mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                let relax = choose_relaxation(&ch, &cfg, RelaxationMode::Asymptotic).unwrap();
                let opts = IterationOptions::default().with_tol(1e-13).with_max_iters(5000);
                let mut errors = Vec::new();
                sa_gmpid_run_observed(&ch, &obs, &prior, cfg.noise_var, &relax, &opts, |_, x| {
                    let e: f64 = x.iter().zip(&lm.posterior_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    errors.push(e / norm);
                })
                .unwrap();
                (rg, rs, decay_rate(&errors).map(|r| r - rs))
            })
            .collect();
        let ordered = per.iter().filter(|p| p.1 < p.0).count();
        let min_ratio = per.iter().map(|p| p.0 / p.1).fold(f64::INFINITY, f64::min);
        let excess = per.iter().map(|p| p.2.unwrap_or(f64::INFINITY)).fold(f64::NEG_INFINITY, f64::max);
        pass &= ordered == per.len() && excess <= C6_RATE_SLACK;
        lines.push(format!(
            "beta {beta}: rho_sa < rho_gmpid on {ordered}/{}, min ratio {min_ratio:.3}, max decay rate - rho_sa {excess:+.4}",
            per.len()
        ));
    }
    outcome(pass, lines.join("; "))
}

fn c7_asymptotic_radii() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    // β = 4 is the pinned configuration; the others are reported only.
    for (bi, beta) in [4.0f64, 2.0, 8.0].into_iter().enumerate() {
        let nu = 400usize;
        let nr = (nu as f64 / beta).round() as usize;
        let cfg = SystemConfig::symmetric(nu, nr, 0.1, 1.0, 0);
        let gamma = solve_variance_fixed_point(&cfg).unwrap().gamma;
        let gt = gamma_tilde(&cfg).unwrap();
        let w = asymptotic_relaxation(&cfg).unwrap();
        let radii: Vec<(f64, f64)> = (0..20u64)
            .into_par_iter()
            .map(|t| {
                let (ch, _, _) = draw(&cfg, 0xC7 + bi as u64, t);
                (radius(&gmpid_iteration_operator(&ch, gamma)), radius(&sa_iteration_operator(&ch, gt, w)))
            })
            .collect();
        let n = radii.len() as f64;
        let g = radii.iter().map(|r| r.0).sum::<f64>() / n;
        let s = radii.iter().map(|r| r.1).sum::<f64>() / n;
        let (ga, sa) = (rho_gmpid_asymptotic(&cfg).unwrap(), rho_sa_asymptotic(&cfg).unwrap());
        let (eg, es) = (g / ga - 1.0, s / sa - 1.0);
        if bi == 0 {
            pass = eg.abs() <= C7_REL_TOL && es.abs() <= C7_REL_TOL;
        }
        let tag = if bi == 0 { "" } else { " (informational)" };
        lines.push(format!(
            "beta {beta}{tag}: rho_gmpid {g:.4} vs {ga:.4} ({eg:+.3}), rho_sa {s:.4} vs {sa:.4} ({es:+.3})"
        ));
    }
    outcome(pass, format!("means over 20 channels at N_u 400; {}", lines.join("; ")))
}

fn c8_divergence_regime() -> Outcome {
    let cfg = SystemConfig::symmetric(500, 350, 1e-3, 1.0, 0);
    let res: Vec<(Verdict, Verdict)> = (0..20u64)
        .into_par_iter()
        .map(|t| {
            let (ch, obs, prior) = draw(&cfg, 0xC8, t);
            let g =
                gmpid_run(&ch, &obs, &prior, cfg.noise_var, &IterationOptions::default().with_max_iters(2000)).unwrap();
            let relax = choose_relaxation(&ch, &cfg, RelaxationMode::ExactEigen).unwrap();
            let opts = IterationOptions::default().with_max_iters(20_000);
            let s = sa_gmpid_run(&ch, &obs, &prior, cfg.noise_var, &relax, &opts).unwrap();
            (g.verdict, s.verdict)
        })
        .collect();
    let diverged = res.iter().filter(|r| r.0 == Verdict::Diverged).count();
    let converged = res.iter().filter(|r| r.1 == Verdict::Converged).count();
    outcome(
        diverged as f64 >= C8_GMPID_DIVERGED_FRACTION * res.len() as f64 && converged == res.len(),
        format!(
            "500x350, noise_var 1e-3: gmpid diverged {diverged}/20, sa_gmpid (exact_eigen w) converged {converged}/20"
        ),
    )
}

fn c9_mmse_prediction() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for (i, v) in [1.0, 0.1, 0.01].into_iter().enumerate() {
        let cfg = SystemConfig::symmetric(400, 100, 0.1, v, 0).with_prior_mode(PriorMode::GenieNoisy);
        let mses: Vec<f64> = (0..50u64)
            .into_par_iter()
            .map(|t| {
                let (ch, obs, prior) = draw(&cfg, 0xC9 + i as u64, t);
                let r = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
                mse(&r.posterior_mean, &obs.x_true).unwrap()
            })
            .collect();
        let mean = mses.iter().sum::<f64>() / mses.len() as f64;
        let pred = predict_mmse_mse(&cfg).unwrap();
        let rel = mean / pred - 1.0;
        pass &= rel.abs() <= C9_REL_TOL;
        lines.push(format!("prior_var {v}: {mean:.5e} vs {pred:.5e} ({rel:+.3})"));
    }
    outcome(pass, format!("50 trials each at 400x100, noise_var 0.1; {}", lines.join("; ")))
}

fn c10_cost_accounting() -> Outcome {
    let cfg = SystemConfig::symmetric(400, 100, 0.1, 1.0, 0);
    let (ch, obs, prior) = draw(&cfg, 0xCA, 0);
    let opts = IterationOptions::default().with_tol(1e-300).with_max_iters(10);
    let g = gmpid_run(&ch, &obs, &prior, cfg.noise_var, &opts).unwrap();
    let relax = choose_relaxation(&ch, &cfg, RelaxationMode::Asymptotic).unwrap();
    let s = sa_gmpid_run(&ch, &obs, &prior, cfg.noise_var, &relax, &opts).unwrap();
    let per = |trace: &[u64]| {
        trace
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 / (400.0 * 100.0))
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (glo, ghi) = per(&g.mul_trace);
    let (slo, shi) = per(&s.mul_trace);
    let in_range = |lo: f64, hi: f64| lo >= C10_COST_RANGE.0 && hi <= C10_COST_RANGE.1;

    let sizes = [100usize, 200, 400, 800];
    let pts: Vec<(f64, f64)> = sizes
        .par_iter()
        .map(|nu| {
            let cfg = SystemConfig::symmetric(*nu, nu / 4, 0.1, 1.0, 0);
            let (ch, obs, prior) = draw(&cfg, 0xCB, 0);
            let r = lmmse_detect(&ch, &obs, &prior, cfg.noise_var).unwrap();
            ((*nu as f64).ln(), (r.mul_count as f64).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    outcome(
        in_range(glo, ghi) && in_range(slo, shi) && slope >= C10_SLOPE_RANGE.0 && slope <= C10_SLOPE_RANGE.1,
        format!(
            "per-iteration muls / (N_u N_r): gmpid [{glo:.3}, {ghi:.3}], sa_gmpid [{slo:.3}, {shi:.3}]; lmmse log-log slope {slope:.3} over N_u 100..800"
        ),
    )
}

fn c11_determinism() -> Outcome {
    let spec = ExperimentSpec {
        name: "determinism".into(),
        detectors: Detector::ALL.to_vec(),
        n_users: 60,
        n_antennas: 20,
        noise_var: 0.1,
        source_var: 1.0,
        prior_mode: PriorMode::GenieNoisy,
        seed: 0xCC,
        prior_var_sweep: vec![1.0, 0.1, 0.01],
        n_trials: 6,
        max_iters: 30,
        tol: 1e-8,
        relaxation: Default::default(),
        relaxation_w: None,
        output_path: "unused.csv".into(),
        sweep_betas: Vec::new(),
        sweep_snr_db: Vec::new(),
    };
    let dir = std::env::temp_dir().join(format!("gmpid-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let runs = [Execution::Serial, Execution::Parallel, Execution::Serial, Execution::Parallel];
    let bytes: Vec<Vec<u8>> = runs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let path = dir.join(format!("run{i}.csv"));
            run_to_file(&spec, *e, &path).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect();
    std::fs::remove_dir_all(&dir).ok();
    let identical = bytes.windows(2).all(|w| w[0] == w[1]);
    let rows = bytes[0].iter().filter(|b| **b == b'\n').count() - 1;
    outcome(
        identical,
        format!(
            "4 runs (serial, parallel, serial, parallel), {rows} rows, {} bytes each, identical: {identical}",
            bytes[0].len()
        ),
    )
}

fn main() {
    let beta4 = convergent_beta4_trials();
    let criteria: Vec<Criterion<'_>> = vec![
        ("variance fixed-point identity", Box::new(c1_variance_identity)),
        ("GMPID variance convergence", Box::new(c2_variance_convergence)),
        ("GMPID mean fixed point", Box::new(|| c3_gmpid_fixed_point(&beta4))),
        ("GMPID suboptimality", Box::new(|| c4_gmpid_suboptimal(&beta4))),
        ("SA-GMPID equals LMMSE", Box::new(c5_sa_matches_lmmse)),
        ("spectral-radius ordering", Box::new(c6_radius_ordering)),
        ("asymptotic radius accuracy", Box::new(c7_asymptotic_radii)),
        ("divergence regime", Box::new(c8_divergence_regime)),
        ("MMSE prediction", Box::new(c9_mmse_prediction)),
        ("cost accounting", Box::new(c10_cost_accounting)),
        ("determinism", Box::new(c11_determinism)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {:>2} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", criteria.len());
    } else {
        println!("acceptance: {} of {} criteria fail: {failed:?}", failed.len(), criteria.len());
        std::process::exit(1);
    }
}
