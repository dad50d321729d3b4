//! `albert`: synthetic data, training, evaluation, inference, distillation and trend plots.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or label-space
//! mismatch, 3 missing file, 4 non-finite numbers. Failures print one JSON line on stderr.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use albert_core::Error;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "albert",
    version,
    about = "Vehicle damage, fake-damage and part segmentation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=3` (repeatable; values parse as JSON).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> albert_core::Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        n: usize,
    },
    /// Train a model; writes model.ckpt and train_log.jsonl into --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also save epoch_<k>.ckpt every k epochs.
        #[arg(long, value_name = "K")]
        checkpoint_every: Option<usize>,
    },
    /// Score a checkpoint on a dataset and write an evaluation report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a checkpoint on one PNG or a dataset; emit predictions and overlays.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// RGB PNG at the model's input size.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory for per-image overlay PNGs.
        #[arg(long)]
        overlay_dir: Option<PathBuf>,
        /// Predictions JSON path; stdout when omitted.
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Distill a teacher checkpoint into a smaller student; writes student.ckpt,
    /// distill_log.jsonl and retention.json into --out.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw an SVG trend chart from evaluation reports and/or JSON-lines logs.
    Plot {
        /// Report or log files, in checkpoint order.
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> albert_core::Result<()> {
    match command {
        Command::GenData { config, out, n } => commands::gen_data(&config.load()?, &out, n),
        Command::Train {
            config,
            data,
            out,
            resume,
            checkpoint_every,
        } => commands::train_cmd(&config.load()?, &data, &out, resume.as_deref(), checkpoint_every),
        Command::Eval {
            config,
            ckpt,
            data,
            report,
        } => commands::eval_cmd(&ckpt, &data, &report, &config.load()?.nms),
        Command::Infer {
            config,
            ckpt,
            image,
            data,
            overlay_dir,
            json_out,
        } => commands::infer_cmd(
            &ckpt,
            image.as_deref(),
            data.as_deref(),
            overlay_dir.as_deref(),
            json_out.as_deref(),
            &config.load()?.nms,
        ),
        Command::Distill {
            config,
            teacher,
            data,
            out,
        } => commands::distill_cmd(&config.load()?, &teacher, &data, &out),
        Command::Plot { logs, out } => commands::plot_cmd(&logs, &out),
    }
}

fn is_missing(e: &Error) -> bool {
    match e {
        Error::File { source, .. } | Error::Io(source) => source.kind() == std::io::ErrorKind::NotFound,
        _ => false,
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::LabelSpaceMismatch(_) => 2,
        _ if is_missing(e) => 3,
        Error::NonFinite { .. } => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Config(_) => "config",
        Error::Domain(_) => "domain",
        Error::NonFinite { .. } => "non_finite",
        Error::MissingParam(_) => "missing_param",
        Error::OutOfRange(_) => "out_of_range",
        Error::Dataset(_) => "dataset",
        Error::Checkpoint(_) => "checkpoint",
        Error::LabelSpaceMismatch(_) => "label_space_mismatch",
        Error::Image(_) => "image",
        _ if is_missing(e) => "missing_file",
        Error::File { .. } | Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({
                "error": kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
