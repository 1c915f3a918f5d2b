use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmpid_core::harness::{
    parse_detector_list, predict, run_experiment, sweep, write_csv_file, write_sweep_csv, Execution, ExperimentSpec,
    SweepRow,
};

/// Monte-Carlo experiments for message-passing detection in overloaded
/// MIMO-NOMA uplinks.
#[derive(Parser)]
#[command(name = "gmpid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every detector of the spec and write per-iteration records.
    Run {
        #[command(flatten)]
        common: Common,
        /// Run trials one after another instead of in parallel.
        #[arg(long)]
        serial: bool,
    },
    /// Print the large-system predictions for each prior variance.
    Predict {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the convergence predictions over the spec's (beta, SNR) grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Also measure spectral radii on `n_trials` random channels per point.
        #[arg(long)]
        measure: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment spec (flat TOML).
    #[arg(long)]
    spec: PathBuf,
    /// CSV output path; defaults to the spec's `output_path`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated detectors, e.g. `lmmse,gmpid,sa_gmpid`.
    #[arg(long)]
    detectors: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentSpec, String> {
        let mut spec = ExperimentSpec::from_path(&self.spec).map_err(|e| format!("{}: {e}", self.spec.display()))?;
        if let Some(t) = self.trials {
            spec.n_trials = t;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(d) = &self.detectors {
            spec.detectors = parse_detector_list(d).map_err(|e| e.to_string())?;
        }
        if let Some(m) = self.max_iters {
            spec.max_iters = m;
        }
        if let Some(o) = &self.out {
            spec.output_path = o.clone();
        }
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

fn write_sweep_file(rows: &[SweepRow], path: &Path) -> Result<(), String> {
    let f = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    write_sweep_csv(rows, BufWriter::new(f)).map_err(|e| e.to_string())
}

fn execute(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { common, serial } => {
            let spec = common.load()?;
            let execution = if serial { Execution::Serial } else { Execution::Parallel };
            let outcome = run_experiment(&spec, execution).map_err(|e| e.to_string())?;
            write_csv_file(&outcome.records, &spec.output_path).map_err(|e| e.to_string())?;
            print!("{}", outcome.summary);
            println!("wrote {} records to {}", outcome.records.len(), spec.output_path.display());
        }
        Command::Predict { common } => {
            let spec = common.load()?;
            let preds = predict(&spec).map_err(|e| e.to_string())?;
            for p in &preds {
                println!("{p}");
            }
            if common.out.is_some() {
                let rows: Vec<SweepRow> = preds
                    .into_iter()
                    .map(|p| SweepRow {
                        beta: p.load_factor(),
                        snr_db: 10.0 * (p.prior_var / p.noise_var).log10(),
                        prediction: p,
                        rho_gmpid_empirical: None,
                        rho_sa_empirical: None,
                    })
                    .collect();
                write_sweep_file(&rows, &spec.output_path)?;
                println!("wrote {} rows to {}", rows.len(), spec.output_path.display());
            }
        }
        Command::Sweep { common, measure } => {
            let spec = common.load()?;
            let rows = sweep(&spec, measure).map_err(|e| e.to_string())?;
            for r in &rows {
                let p = &r.prediction;
                let emp = match (r.rho_gmpid_empirical, r.rho_sa_empirical) {
                    (Some(g), Some(s)) => format!("  measured rho_gmpid {g:.4}  rho_sa {s:.4}"),
                    _ => String::new(),
                };
                println!(
                    "beta {:>7.3}  snr {:>6.2} dB  rho_gmpid {:.4}  rho_sa {:.4}  w* {:.5}  gmpid predicted {}{emp}",
                    r.beta,
                    r.snr_db,
                    p.rho_gmpid_asymptotic,
                    p.rho_sa_asymptotic,
                    p.w_star,
                    if p.rho_gmpid_asymptotic < 1.0 { "convergent" } else { "divergent" },
                );
            }
            write_sweep_file(&rows, &spec.output_path)?;
            println!("wrote {} rows to {}", rows.len(), spec.output_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
