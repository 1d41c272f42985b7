//! Command-line interface: simulate | pretrain | adapt | eval | infer.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use clap::{Args, Parser, Subcommand};
use rfhpe::commands;
use rfhpe::config::{resolve, Overrides};
use rfhpe::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "rfhpe",
    version,
    about = "RF hand pose estimation: synthetic UWB datasets, complex-valued network training, occluded-domain adaptation, PCK evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero manifest timestamps for byte-reproducible outputs.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize radar datasets, one directory per material.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output parent directory.
        #[arg(long)]
        out: PathBuf,
        /// Samples per dataset.
        #[arg(long)]
        count: Option<usize>,
        /// Comma-separated materials (identity = normal domain).
        #[arg(long, value_delimiter = ',')]
        material: Option<Vec<String>>,
    },
    /// Train the network on a normal-domain dataset with teacher records.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Held-out validation dataset directory.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Channel schedule: desk | full.
        #[arg(long)]
        arch: Option<String>,
        /// Network variant: complex | real-concat | i-only | q-only.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        heatmap_weight: Option<f64>,
    },
    /// Adapt a pretrained checkpoint to unlabeled occluded data.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Labeled normal-domain training dataset.
        #[arg(long)]
        data_no: PathBuf,
        /// Labeled normal-domain validation dataset (precondition + history).
        #[arg(long)]
        val_no: PathBuf,
        /// Parent directory of occluded dataset directories.
        #[arg(long)]
        data_oc: PathBuf,
        /// Occluded validation dataset for the history's PCK column.
        #[arg(long)]
        val_oc: Option<PathBuf>,
        /// Material excluded from adaptation (leave-one-out runs).
        #[arg(long)]
        exclude_material: Option<String>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda_dd: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode keypoints for dataset samples.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index; omitted = all samples.
        #[arg(long)]
        index: Option<usize>,
        /// CSV output path; omitted = stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_overrides(common: &Common) -> Overrides {
    Overrides {
        seed: common.seed,
        deterministic: common.deterministic,
        ..Overrides::default()
    }
}

fn run() -> rfhpe::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Simulate {
            common,
            out,
            count,
            material,
        } => {
            let mut over = base_overrides(&common);
            over.count = count;
            over.materials = material;
            let cfg = resolve(common.config.as_deref(), &over)?;
            commands::cmd_simulate(&cfg, &out)?;
            Ok(())
        }
        Cmd::Pretrain {
            common,
            data,
            val,
            out,
            epochs,
            alpha,
            arch,
            variant,
            batch_size,
            learning_rate,
            heatmap_weight,
        } => {
            let mut over = base_overrides(&common);
            over.epochs = epochs;
            over.alpha = alpha;
            over.arch = arch;
            over.variant = variant;
            over.batch_size = batch_size;
            over.learning_rate = learning_rate;
            over.heatmap_weight = heatmap_weight;
            let cfg = resolve(common.config.as_deref(), &over)?;
            commands::cmd_pretrain(&cfg, &data, val.as_deref(), &out)?;
            Ok(())
        }
        Cmd::Adapt {
            common,
            ckpt,
            data_no,
            val_no,
            data_oc,
            val_oc,
            exclude_material,
            out,
            epochs,
            lambda_dd,
            batch_size,
            learning_rate,
        } => {
            let mut over = base_overrides(&common);
            over.epochs = epochs;
            over.exclude_material = exclude_material;
            over.lambda_dd = lambda_dd;
            over.batch_size = batch_size;
            over.learning_rate = learning_rate;
            let cfg = resolve(common.config.as_deref(), &over)?;
            commands::cmd_adapt(
                &cfg,
                &ckpt,
                &data_no,
                &val_no,
                &data_oc,
                val_oc.as_deref(),
                &out,
            )?;
            Ok(())
        }
        Cmd::Eval {
            common,
            ckpt,
            data,
            out,
        } => {
            let cfg = resolve(common.config.as_deref(), &base_overrides(&common))?;
            commands::cmd_eval(&cfg, &ckpt, &data, &out)?;
            Ok(())
        }
        Cmd::Infer {
            common,
            ckpt,
            data,
            index,
            out,
        } => {
            let cfg = resolve(common.config.as_deref(), &base_overrides(&common))?;
            commands::cmd_infer(&cfg, &ckpt, &data, index, out.as_deref())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // bad argument values and malformed configs are usage errors
                Error::InvalidInput(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
