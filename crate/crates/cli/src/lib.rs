//! `refinery` command-line driver.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure, 64 usage.

pub mod commands;
pub mod config;
pub mod workdir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: String) -> Self {
        Failure::Usage(msg)
    }

    pub fn validation(e: impl Into<anyhow::Error>) -> Self {
        Failure::Validation(e.into())
    }

    pub fn io(e: impl Into<anyhow::Error>) -> Self {
        Failure::Io(e.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 64,
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Validation(e) => write!(f, "error: {e:#}"),
            Failure::Io(e) => write!(f, "i/o error: {e:#}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "refinery", version, about = "Human-in-the-loop refinement of grasp datasets")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a dataset tree as version 0
    Import,
    /// Flag images whose top prediction misses every label
    Triage {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "model")]
        model_tag: String,
    },
    /// Serve the review queue of the latest iteration
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Close the reviewed iteration and build the next version
    Apply,
    /// Write a version as a dataset tree
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the latest version
        #[arg(long)]
        version: Option<u32>,
    },
    /// Per-iteration false counts and FN/TN proportions
    Stats {
        #[arg(long, value_enum, default_value = "csv")]
        format: commands::StatsFormat,
    },
    /// Closed-loop run on a synthetic corpus
    Simulate {
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value_t = 0.3)]
        drop: f64,
        #[arg(long, default_value_t = 0.05)]
        corrupt: f64,
        #[arg(long, default_value_t = 5)]
        iterations: u32,
        /// Gaussian noise level (pixels; radians scaled per pixel)
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Oracle seed; defaults to the corpus seed
        #[arg(long)]
        loop_seed: Option<u64>,
    },
    /// Rectangle-metric accuracy of predictions against a version
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        version: Option<u32>,
    },
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 64 } else { 0 };
        }
    };
    let result = RunConfig::resolve(&cli.overrides).and_then(|cfg| commands::dispatch(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.code()
        }
    }
}
