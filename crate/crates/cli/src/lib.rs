//! Experiment harness for `nar-core`.
//!
//! Every run reads one JSON configuration (or a previous run's
//! `manifest.json`), writes its outputs into a single directory, and records a
//! manifest there before starting and again when done.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 configuration error,
//! 3 guard violation, 4 oracle or verification failure.

pub mod commands;
pub mod config;
pub mod demos;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Outputs;
use crate::config::{subcommand_for, RunConfig, TaskConfig};
use crate::error::{CliError, EXIT_OK};
use crate::manifest::RunManifest;

pub const OUT_DIR_ENV: &str = "NAR_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "nar-out";

#[derive(Debug, Parser)]
#[command(name = "nar", version, about = "Operator/skip refinement search experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Controller search (nar_fixed_skip, alternating or joint).
    Search(RunArgs),
    /// Exhaustive scan of a small space under a pure oracle.
    Enumerate(RunArgs),
    /// Per-decision reward credit and its noise over repeated batches.
    AnalyzeRewards(RunArgs),
    /// Multi-seed demonstrations.
    Demo {
        /// Must agree with the configuration's mode when given.
        which: Option<DemoKind>,
        #[command(flatten)]
        args: RunArgs,
    },
    /// Finite-difference check of the controller gradient.
    Gradcheck(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DemoKind {
    Fig1,
    Bias,
    Eq11,
    Pretrain,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Configuration JSON, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (overrides NAR_OUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Search(_) => "search",
            Command::Enumerate(_) => "enumerate",
            Command::AnalyzeRewards(_) => "analyze-rewards",
            Command::Demo { .. } => "demo",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Search(a) | Command::Enumerate(a) | Command::AnalyzeRewards(a) | Command::Gradcheck(a) => a,
            Command::Demo { args, .. } => args,
        }
    }
}

pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

/// Runs the experiment described by `config`, writing into `out`.
pub fn execute(config: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    match config {
        RunConfig::Search(c) => commands::search(c, out).map(drop),
        RunConfig::Task(t) => match t {
            TaskConfig::Enumerate(c) => commands::enumerate(c, out).map(drop),
            TaskConfig::AnalyzeRewards(c) => commands::analyze_rewards(c, out).map(drop),
            TaskConfig::Gradcheck(c) => {
                let report = commands::gradcheck(c, out)?;
                if report.pass {
                    Ok(())
                } else {
                    let worst = report
                        .modes
                        .iter()
                        .map(|m| m.max_rel_error)
                        .fold(f64::NEG_INFINITY, f64::max);
                    Err(CliError::CheckFailed(format!(
                        "max relative error {worst:e} is not below tolerance {:e}",
                        report.tolerance
                    )))
                }
            }
            TaskConfig::Fig1(c) => demos::fig1(c, out).map(drop),
            TaskConfig::Bias(c) => demos::bias(c, out).map(drop),
            TaskConfig::Eq11(c) => demos::eq11(c, out).map(drop),
            TaskConfig::Pretrain(c) => demos::pretrain(c, out).map(drop),
        },
    }
}

fn check_mode(command: &Command, config: &RunConfig) -> Result<(), CliError> {
    let mode = config.mode();
    let expected = subcommand_for(&mode);
    if expected != command.name() {
        return Err(CliError::Config(format!(
            "mode {mode:?} belongs to `nar {expected}`, not `nar {}`",
            command.name()
        )));
    }
    if let Command::Demo { which: Some(which), .. } = command {
        let wanted = which.to_possible_value().expect("no skipped variants");
        if wanted.get_name() != mode {
            return Err(CliError::Config(format!(
                "demo {} requested but the configuration's mode is {mode:?}",
                wanted.get_name()
            )));
        }
    }
    Ok(())
}

/// Parses, runs and returns the process exit code. Diagnostics go to stderr.
pub fn run(cli: Cli) -> i32 {
    let command = cli.command;
    let args = command.args();
    let config = match config::load(&args.config).and_then(|c| check_mode(&command, &c).map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("nar: {e}");
            return e.exit_code();
        }
    };
    let workers = args.workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    });
    if workers == 0 {
        eprintln!("nar: config error: --workers must be at least 1");
        return error::EXIT_CONFIG;
    }
    let out_dir = resolve_out_dir(args.out.as_deref());
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("nar: cannot start {workers} workers: {e}");
            return error::EXIT_INTERNAL;
        }
    };

    let mut outputs = match Outputs::create(&out_dir) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("nar: {e}");
            return e.exit_code();
        }
    };
    let mut manifest = RunManifest::begin(
        command.name(),
        config.mode(),
        config.to_value(),
        config.seed(),
        workers,
        &out_dir,
    );
    if let Err(e) = manifest.write() {
        eprintln!("nar: {e}");
        return e.exit_code();
    }

    let result = pool.install(|| execute(&config, &mut outputs));
    let mut files = outputs.files().to_vec();
    files.push(manifest::MANIFEST_FILE.to_string());
    manifest.finish(files, result.as_ref().err());
    let code = match &result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("nar: {e}");
            e.exit_code()
        }
    };
    if let Err(e) = manifest.write() {
        eprintln!("nar: {e}");
        return if code == EXIT_OK { e.exit_code() } else { code };
    }
    if code == EXIT_OK {
        eprintln!("nar: wrote {}", out_dir.display());
    }
    code
}

/// Entry point shared by the binary and in-process callers.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}
