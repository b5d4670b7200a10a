use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use croprot_cli::config::{parse_variant, parse_year};
use croprot_cli::{commands::*, exit_code, RunConfig};
use croprot_core::calibration::DEFAULT_BINS;
use croprot_core::training::YearFilter;

/// Multi-year crop classification experiments: synthetic data, spatial
/// folds, training, calibration, CRF rescoring and rotation statistics.
#[derive(Parser)]
#[command(name = "croprot", version)]
struct Cli {
    /// Worker threads for inference (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the config's dataset section.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Assign parcels to spatially blocked folds.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Block side in meters.
        #[arg(long, default_value_t = 1000.0)]
        block: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Cross-validated training; writes checkpoints, predictions and a run report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// single, dec, dec-concat, dec-one-year or obs.
        #[arg(long)]
        variant: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a checkpoint: metrics report, confusion matrix, per-class IoU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Fold file; with --fold, only that fold's parcels are scored.
        #[arg(long, requires = "fold")]
        folds: Option<PathBuf>,
        #[arg(long, requires = "folds")]
        fold: Option<usize>,
        /// 1, 2, 3 or all.
        #[arg(long, default_value = "all")]
        year: String,
        /// Expected head variant of the checkpoint.
        #[arg(long)]
        variant: Option<String>,
        /// Seed of the evaluation pixel draw.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fit temperatures on validation predictions; ECE before and after.
    Calibrate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Rescore calibrated third-year predictions with smoothed label transitions.
    Crf {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        folds: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Rotation coverage table, crop categories and rotation counts.
    Rotations {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Export per parcel-year descriptors as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth { config, seed, out } => {
            let cfg = RunConfig::load(&config)?;
            let path = cmd_synth(&cfg, &out.out, seed)?;
            println!("wrote {}", path.display());
        }
        Command::Split {
            dataset,
            k,
            block,
            seed,
            out,
        } => {
            let path = cmd_split(&dataset, k, block, seed, &out.out)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            config,
            seed,
            variant,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let overrides = TrainOverrides {
                seed,
                variant: variant.as_deref().map(parse_variant).transpose()?,
            };
            let report = cmd_train(&cfg, &overrides, &out.out)?;
            for f in &report.folds {
                if let Some(s) = &f.test.pooled {
                    println!(
                        "fold {}: OA {:.4} mIoU {:.4} (best epoch {})",
                        f.test_fold, s.overall_accuracy, s.miou, f.best_epoch
                    );
                }
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            folds,
            fold,
            year,
            variant,
            seed,
            out,
        } => {
            let req = EvalRequest {
                checkpoint: &checkpoint,
                dataset: &dataset,
                folds: folds.as_deref().zip(fold),
                years: parse_year(&year)?,
                expected_variant: variant.as_deref().map(parse_variant).transpose()?,
                seed,
            };
            let r = cmd_eval(&req, &out.out)?;
            let years = match r.years {
                YearFilter::All => "all years".to_string(),
                YearFilter::Only(y) => format!("year {y}"),
            };
            println!("{} on {years}: OA {:.4} mIoU {:.4}", r.variant, r.overall_accuracy, r.miou);
        }
        Command::Calibrate { predictions, bins, out } => {
            let r = cmd_calibrate(&predictions, bins, &out.out)?;
            for f in &r.folds {
                println!(
                    "fold {}: tau {:.4}, validation ECE {:.4} -> {:.4}",
                    f.fold, f.tau, f.validation_ece_before, f.validation_ece_after
                );
            }
        }
        Command::Crf {
            predictions,
            dataset,
            folds,
            alpha,
            out,
        } => {
            let r = cmd_crf(&predictions, &dataset, &folds, alpha, &out.out)?;
            if let (Some(b), Some(c)) = (&r.base, &r.crf) {
                println!("year 3 mIoU {:.4} -> {:.4} with CRF", b.miou, c.miou);
            }
        }
        Command::Rotations { dataset, out } => {
            let r = cmd_rotations(&dataset, &out.out)?;
            println!(
                "{} of {} possible rotations observed; mean coverage at 50/75/90/100%: {:?}",
                r.observed_rotations, r.possible_rotations, r.table.mean
            );
        }
        Command::Embed {
            checkpoint,
            dataset,
            seed,
            out,
        } => {
            let rows = cmd_embed(&checkpoint, &dataset, seed, &out.out)?;
            println!("wrote {rows} embeddings");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
