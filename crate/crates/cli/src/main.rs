//! `dkv`: generation, benchmarking, K/V dynamics analysis and self-test for
//! the dkv-core engine.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dkv_core::cache::Fault;

/// Process exit codes.
pub mod exit {
    pub const SELFTEST_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const RUNTIME: u8 = 3;
    pub const MISSING_SNAPSHOTS: u8 = 4;
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: exit::CONFIG,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: exit::RUNTIME,
            error: error.into(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "dkv", version, about = "Delayed KV caching for masked diffusion LMs (toy scale)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    ReorderIndex,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::ReorderIndex => Fault::ReorderIndex,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one generation and write sequence.txt, trace.jsonl and report.json.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Single thread, no wall-time fields; outputs are byte-reproducible.
        #[arg(long)]
        deterministic: bool,
        /// Capture K/V of this layer every step (needed by `analyze`).
        #[arg(long, value_name = "LAYER")]
        snapshots: Option<usize>,
        /// Also write cache_layout.jsonl (cached and computed positions per step).
        #[arg(long)]
        layout_dump: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Compare cache variants on the same prompt and seed; writes bench.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variants, e.g. `none,decode:8,pd:4,greedy:8:4`.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Timed runs per variant; throughput is the median.
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Compute K/V dynamics from a trace recorded with snapshots.
    Analyze {
        trace: PathBuf,
        /// Defaults to the trace's directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the built-in checks at reduced size.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Write the seeded weights as weights.bin (f32 LE) plus weights.json.
    DumpWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            config,
            deterministic,
            snapshots,
            layout_dump,
            output_dir,
            inject_fault,
        } => commands::generate(commands::GenerateArgs {
            config,
            deterministic,
            snapshots,
            layout_dump,
            output_dir,
            fault: inject_fault.map(Fault::from),
        }),
        Command::Bench {
            config,
            variants,
            repeat,
            deterministic,
            output_dir,
        } => commands::bench(&config, variants, repeat, deterministic, output_dir),
        Command::Analyze { trace, output_dir } => commands::analyze(&trace, output_dir),
        Command::Selftest { inject_fault } => commands::selftest(inject_fault.map(Fault::from)),
        Command::DumpWeights { config, output_dir } => commands::dump_weights(&config, output_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
