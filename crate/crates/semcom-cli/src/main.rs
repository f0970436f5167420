//! Command-line entry point: experiment grids, single-stage runs, dataset
//! export, and the numeric verification suites.
//!
//! Exit codes: 0 on success, 1 on configuration/usage problems, 2 when a
//! numeric check fails or an I/O fault interrupts a run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semcom::datagen::{self, GenConfig};
use semcom::error::{Error, Result};
use semcom::model::save_checkpoint;
use semcom_cli::stages::{checkpoint_path, run_finetune_stage, run_pretrain_stage};
use semcom_cli::{
    emit_csv, fmt_float, load_gen_config, load_grid, load_run_config, loss_grad_reports,
    mi_identity_suite, run_grid_to_dir, ExperimentGrid,
};

#[derive(Parser)]
#[command(
    name = "semcom",
    version,
    about = "Two-stage multi-modal semantic communication experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid; writes metrics.csv, curves.svg, config.json.
    Run {
        /// Grid or single-run JSON config (default: built-in four-method grid).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: $SEMCOM_OUT, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the seed sweep with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads across grid cells.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Pre-train encoders only (Stage I) and save a model checkpoint.
    Pretrain {
        /// Single-run JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $SEMCOM_OUT, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune over the channel (Stage II), optionally from a checkpoint.
    Finetune {
        /// Single-run JSON config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $SEMCOM_OUT, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint to start from (e.g. a pretrain run's models.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Verify the information decomposition identities on random joints.
    VerifyMi {
        /// Number of random joints to test.
        #[arg(long, default_value_t = 100)]
        trials: u64,
    },
    /// Check every training loss gradient against finite differences.
    GradCheck,
    /// Generate the synthetic dataset and write train/ and test/ CSV files.
    ExportData {
        /// Generator, run, or grid JSON config (default: built-in generator).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: $SEMCOM_OUT, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; bad flags are usage
            // errors (exit 1 with the usage text).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for configuration problems the user can fix, 2 for numeric or I/O
/// failures inside a run.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_)
        | Error::Contract(_)
        | Error::Dimension { .. }
        | Error::Serde(_)
        | Error::Format { .. } => 1,
        Error::NonFinite { .. }
        | Error::NonDeterministic(_)
        | Error::Numeric { .. }
        | Error::ChannelOutage
        | Error::Io(_) => 2,
    }
}

fn resolve_out(out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| std::env::var_os("SEMCOM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => cmd_run(config.as_deref(), &resolve_out(out), seed, threads),
        Command::Pretrain { config, out, seed } => {
            cmd_pretrain(&config, &resolve_out(out), seed)
        }
        Command::Finetune {
            config,
            out,
            seed,
            from,
        } => cmd_finetune(&config, &resolve_out(out), seed, from.as_deref()),
        Command::VerifyMi { trials } => cmd_verify_mi(trials),
        Command::GradCheck => cmd_grad_check(),
        Command::ExportData { config, out } => {
            cmd_export_data(config.as_deref(), &resolve_out(out))
        }
    }
}

fn cmd_run(config: Option<&Path>, out: &Path, seed: Option<u64>, threads: usize) -> Result<()> {
    let mut grid = match config {
        Some(path) => load_grid(path)?,
        None => ExperimentGrid::accuracy_trend_grid(),
    };
    if let Some(seed) = seed {
        grid.seeds = vec![seed];
    }
    let cells = grid.expand().len();
    println!("running {cells} experiment cells with {threads} thread(s)...");
    let artifacts = run_grid_to_dir(&grid, out, threads)?;
    println!(
        "wrote {} records to {}",
        artifacts.records.len(),
        artifacts.csv.display()
    );
    println!("wrote {}", artifacts.svg.display());
    println!("wrote {}", artifacts.config.display());
    Ok(())
}

fn cmd_pretrain(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(out)?;
    let stage = run_pretrain_stage(&cfg)?;
    let ckpt = checkpoint_path(out);
    save_checkpoint(&ckpt, &stage.encoders, &stage.decoder, cfg.seed, "pretrain")?;
    emit_csv(&stage.records, &out.join("metrics.csv"))?;
    let last = stage.records.last().expect("at least one epoch snapshot");
    println!(
        "pre-trained {} epochs (final epoch loss {}); uplink/downlink scalars: {}/{}",
        cfg.epochs_pretrain,
        fmt_float(last.train_loss),
        stage.ledger.total_uplink(),
        stage.ledger.total_downlink()
    );
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_finetune(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    from: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(out)?;
    let stage = run_finetune_stage(&cfg, from)?;
    let ckpt = checkpoint_path(out);
    save_checkpoint(&ckpt, &stage.encoders, &stage.decoder, cfg.seed, "finetune")?;
    emit_csv(&stage.records, &out.join("metrics.csv"))?;
    let last = stage.records.last().expect("at least one round snapshot");
    println!(
        "fine-tuned {} rounds; final test accuracy {}; uplink/downlink scalars: {}/{}",
        last.round,
        fmt_float(last.test_accuracy),
        stage.ledger.total_uplink(),
        stage.ledger.total_downlink()
    );
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_verify_mi(trials: u64) -> Result<()> {
    let report = mi_identity_suite(trials)?;
    println!(
        "checked {} random joints: max identity residual {:.3e}",
        report.trials, report.max_residual
    );
    println!(
        "xor joint interaction information: {} bits (expected -1 exactly)",
        report.xor_interaction
    );
    println!("smallest mutual information seen: {:.3e}", report.min_mi);
    if report.max_residual > 1e-12 {
        return Err(Error::Numeric {
            check: "mi-identities",
            detail: format!("max residual {} exceeds 1e-12", report.max_residual),
        });
    }
    if report.xor_interaction != -1.0 {
        return Err(Error::Numeric {
            check: "mi-identities",
            detail: format!("xor interaction {} != -1", report.xor_interaction),
        });
    }
    println!("all identities hold");
    Ok(())
}

fn cmd_grad_check() -> Result<()> {
    let reports = loss_grad_reports()?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<20} max relative error {:.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        println!("all {} loss gradients verified", reports.len());
        Ok(())
    } else {
        Err(Error::Numeric {
            check: "loss-gradients",
            detail: format!("failing losses: {}", failed.join(", ")),
        })
    }
}

fn cmd_export_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let gen = match config {
        Some(path) => load_gen_config(path)?,
        None => GenConfig::default_two_modality(),
    };
    let (train, test) = datagen::gen_dataset(&gen)?;
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&test_dir)?;
    datagen::export_csv(&train, &train_dir)?;
    datagen::export_csv(&test, &test_dir)?;
    println!(
        "wrote {} train and {} test samples across {} modalities to {}",
        train.num_samples(),
        test.num_samples(),
        train.num_modalities(),
        out.display()
    );
    Ok(())
}
