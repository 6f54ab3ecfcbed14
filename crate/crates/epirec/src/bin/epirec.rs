//! Command-line driver for the reconstruction pipeline:
//! simulate -> init-field -> train -> reconstruct -> evaluate -> compare,
//! plus the archived experiment scenarios. Thin dispatch only; everything
//! lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epirec::config::RunConfig;
use epirec::error::Error;
use epirec::experiments;
use epirec::pipeline;

#[derive(Parser)]
#[command(name = "epirec", version, about = "Joint image and field-map reconstruction for blip-up/down EPI on digital phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration (overrides --preset)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration preset
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::preset(&self.preset)?,
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a blip-up/down multi-shot dataset bundle
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output bundle directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the initial field map and write it into the bundle
    InitField {
        /// Dataset bundle directory
        #[arg(long)]
        bundle: PathBuf,
        /// Use the ground-truth field plus a smooth perturbation of this
        /// RMSE instead of the displacement estimator
        #[arg(long)]
        oracle_rmse_hz: Option<f64>,
    },
    /// Zero-shot training; writes the best-validation checkpoint and report
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Omit wall-clock timings from reports
        #[arg(long)]
        deterministic: bool,
    },
    /// Reconstruct every direction with a trained checkpoint
    Reconstruct {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reconstructions against the bundle's ground truth
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// Report file (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Also write PNG difference maps next to the report
        #[arg(long)]
        png: bool,
        #[arg(long)]
        deterministic: bool,
    },
    /// Full method comparison: SENSE+init correction, static-field
    /// baseline, joint method
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Archived experiment scenarios
    Experiments {
        #[command(subcommand)]
        action: ExperimentsAction,
    },
}

#[derive(Subcommand)]
enum ExperimentsAction {
    /// Run a named scenario and archive its reports
    Run {
        /// Scenario: distorted-desk | zero-field-sanity | sweep-wgrad
        name: String,
        #[arg(long, default_value = "artifacts")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { cfg, out } => {
            let config = cfg.resolve()?;
            pipeline::cmd_simulate(&config, &out)?;
            println!("bundle written to {}", out.display());
        }
        Command::InitField {
            bundle,
            oracle_rmse_hz,
        } => {
            match oracle_rmse_hz {
                Some(rmse) => pipeline::cmd_init_field_oracle(&bundle, rmse)?,
                None => pipeline::cmd_init_field(&bundle)?,
            }
            println!("initial field written into {}", bundle.display());
        }
        Command::Train {
            cfg,
            bundle,
            out,
            deterministic,
        } => {
            let config = cfg.resolve()?;
            pipeline::cmd_train(&bundle, &config, &out, deterministic)?;
            println!("checkpoint and report written to {}", out.display());
        }
        Command::Reconstruct {
            bundle,
            checkpoint,
            out,
        } => {
            pipeline::cmd_reconstruct(&bundle, &checkpoint, &out)?;
            println!("reconstructions written to {}", out.display());
        }
        Command::Evaluate {
            bundle,
            recon,
            out,
            png,
            deterministic,
        } => {
            let report = pipeline::cmd_evaluate(&bundle, &recon, &out, png, deterministic)?;
            if report.gt_available {
                println!(
                    "nrmse {:.4}  lcc {:.4}  ssim {:.4}  hfen {:.4}  field rmse {:?} Hz",
                    report.mean.nrmse,
                    report.mean.lcc,
                    report.mean.ssim,
                    report.mean.hfen,
                    report.refined_field_rmse_hz
                );
            } else {
                println!("no ground truth in bundle; wrote report without metrics");
            }
        }
        Command::Compare {
            cfg,
            bundle,
            out,
            deterministic,
        } => {
            let config = cfg.resolve()?;
            let table = pipeline::cmd_compare(&bundle, &config, &out, deterministic)?;
            println!("{:<12} {:>8} {:>8} {:>8} {:>8} {:>12}", "method", "nrmse", "lcc", "ssim", "hfen", "field_rmse");
            for (name, m) in &table.rows {
                println!(
                    "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12.3}",
                    name,
                    m.nrmse,
                    m.lcc,
                    m.ssim,
                    m.hfen,
                    m.field_rmse_hz.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Experiments { action } => match action {
            ExperimentsAction::Run {
                name,
                out,
                seed,
                deterministic,
            } => {
                if name == "sweep-wgrad" {
                    let dirs = experiments::run_sweep_wgrad(&out, &[0.0, 1.0, 10.0], deterministic)?;
                    println!("sweep archived {} runs under {}", dirs.len(), out.display());
                } else {
                    let mut spec = experiments::builtin(&name)?;
                    if let Some(s) = seed {
                        spec.config = spec.config.with_seed(s);
                    }
                    let outcome = experiments::run_experiment(&spec, &out, deterministic)?;
                    for (k, v) in &outcome.metrics {
                        println!("{k} = {v:.6}");
                    }
                    if outcome.passed {
                        println!("experiment '{name}': PASS");
                    } else {
                        for f in &outcome.failures {
                            eprintln!("ASSERTION FAILED: {f}");
                        }
                        return Err(Error::numerical(format!(
                            "experiment '{name}' failed its assertions"
                        )));
                    }
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
