use std::path::PathBuf;
use std::process::ExitCode;

use bmdgan::cli::{self, StageSelect};
use bmdgan::config::RunConfig;
use clap::{Parser, Subcommand};

/// Radiograph decomposition and BMD estimation on synthetic phantoms.
///
/// Exit codes: 0 success, 2 config or argument error, 3 I/O error,
/// 4 training diverged, 5 degenerate fit or undefined metric.
#[derive(Parser)]
#[command(name = "bmdgan", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth {
        /// Defaults to `paths.data_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train stage 1, stage 2 or both.
    Train {
        #[arg(long, default_value = "all")]
        stage: StageSelect,
        /// Train stage 2 from scratch instead of warm-starting it.
        #[arg(long)]
        no_hl: bool,
        /// Stage 1 checkpoint to warm-start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit the BMD calibration on the training split.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score the test split and write the report and plots.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Regression baseline checkpoint to report alongside.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train the direct-regression baseline.
    Baseline {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn run(args: Args) -> bmdgan::Result<Vec<PathBuf>> {
    let path = args.config.ok_or_else(|| bmdgan::Error::Config("--config is required".into()))?;
    let cfg = RunConfig::load(&path)?;
    let manifest = |m: Option<PathBuf>| m.unwrap_or_else(|| cli::manifest_path(&cfg));
    Ok(match args.command {
        Command::Synth { out_dir } => vec![cli::cmd_synth(&cfg, out_dir.as_deref())?],
        Command::Train { stage, no_hl, init, manifest: m } => {
            cli::cmd_train(&cfg, &manifest(m), stage, no_hl, init.as_deref())?
        }
        Command::Calibrate { ckpt, manifest: m } => vec![cli::cmd_calibrate(&cfg, &ckpt, &manifest(m))?],
        Command::Evaluate { ckpt, calibration, manifest: m, baseline } => {
            vec![cli::cmd_evaluate(&cfg, &ckpt, &calibration, &manifest(m), baseline.as_deref())?]
        }
        Command::Baseline { manifest: m } => vec![cli::cmd_baseline(&cfg, &manifest(m))?],
    })
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
