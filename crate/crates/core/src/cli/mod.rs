//! Command-line front end.
//!
//! Exit codes: 0 success, 1 synthetic recovery criterion failed, 2 usage or
//! configuration error, 3 I/O error.

mod commands;
pub mod config;
pub mod image;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use self::config::{FileConfig, RunConfig, Settings};
pub use self::image::{decode_pnm, encode_pnm, load_image, Image, ImageError};
pub use commands::{format_detection_line, parse_detections, DetectionRecord};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Criterion(String),
    /// Help or version text; not a failure.
    #[error("{0}")]
    Info(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Criterion(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "faceprop", version, about = "Face proposals from a sparse image pyramid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write face proposals for each input image.
    Detect(DetectArgs),
    /// Compare dense and sparse pyramids: workload, time, and accuracy.
    Bench(BenchArgs),
    /// Score a detection file against an annotation file.
    Eval(EvalArgs),
    /// Run the planted-heatmap recovery check on synthetic scenes.
    Synth(SynthArgs),
    /// Write a seeded random weight file.
    Weights(WeightsArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// PPM/PGM images.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// PPM/PGM images; may be empty with --geometry.
    pub images: Vec<PathBuf>,
    /// Scale factor of the dense baseline pyramid.
    #[arg(long)]
    pub dense_scale_factor: Option<f64>,
    /// Timed passes per configuration (at least 5).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Only compare pyramid geometry for a WIDTHxHEIGHT image.
    #[arg(long, value_name = "WxH")]
    pub geometry: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detection file written by `detect`.
    #[arg(long)]
    pub detections: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Background noise amplitude.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long, default_value_t = crate::network::DEFAULT_NUM_CLASSES)]
    pub classes: usize,
}

/// Parses `args` and runs the command, writing reports to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Info(e.to_string()),
        _ => CliError::Usage(e.render().to_string()),
    })?;
    let rc = RunConfig::resolve(&cli.settings)?;
    match cli.command {
        Command::Detect(a) => commands::detect(&rc, &a, out),
        Command::Bench(a) => commands::bench(&rc, &a, out),
        Command::Eval(a) => commands::eval(&rc, &a, out),
        Command::Synth(a) => commands::synth(&rc, &a, out),
        Command::Weights(a) => commands::weights(&rc, &a, out),
    }
}

/// Binary entry point; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(args, &mut lock) {
        Ok(()) => 0,
        Err(CliError::Info(msg)) => {
            let _ = write!(lock, "{msg}");
            0
        }
        Err(e) => {
            let _ = lock.flush();
            eprintln!("faceprop: {e}");
            e.exit_code()
        }
    }
}
