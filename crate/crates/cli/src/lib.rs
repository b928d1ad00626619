//! Command-line front end for nmslope.
//!
//! [`run`] parses an argument vector, executes one command and returns the
//! process exit code. Failures print one JSON line on stderr:
//! `{"error":"config","code":2,"message":"..."}`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nmslope::{Error, NmPattern};

mod commands;

pub use commands::{densest_label, sweep_variants};

/// Environment variable capping the worker threads used by the kernels.
pub const THREADS_ENV: &str = "NM_SLOPE_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "nm-slope", version, about = "Double-pruned N:M sparse training experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Directory receiving every artifact of the command.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed; overrides `train.seed` for config-driven commands.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration; writes loss.csv, summary.json and checkpoint/.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Skip writing checkpoint/.
        #[arg(long)]
        no_checkpoint: bool,
    },
    /// Analytic vs Monte Carlo imposed sparsity of double pruning.
    VerifyLemma {
        #[arg(long, value_delimiter = ',', default_value = "1:2,2:4,2:8,4:8")]
        patterns: Vec<NmPattern>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Side of the square random matrix.
        #[arg(long, default_value_t = 512)]
        side: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Unbiasedness of the masked input-gradient estimator.
    VerifyTheorem {
        #[arg(long, default_value = "2:4")]
        pattern: NmPattern,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        /// Side of the square weight; the gradient has the same shape.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Training and inference footprint models.
    ReportMemory {
        #[arg(long, default_value = "2:4")]
        pattern: NmPattern,
        #[arg(long, default_value_t = 0)]
        rank: usize,
        #[arg(long, default_value_t = 1024)]
        d_in: usize,
        #[arg(long, default_value_t = 1024)]
        d_out: usize,
        #[arg(long, default_value_t = 16)]
        weight_bits: u32,
        /// Bits per mask element: 8 (byte mask) or 1 (bitmap).
        #[arg(long, default_value_t = 8)]
        mask_bits: u32,
        #[command(flatten)]
        common: Common,
    },
    /// FLOP ratio and arithmetic intensity of a sparse plus low-rank layer.
    ReportFlops {
        #[arg(long, default_value = "2:4")]
        pattern: NmPattern,
        #[arg(long, default_value_t = 0)]
        rank: usize,
        #[arg(long, default_value_t = 2048)]
        batch: usize,
        #[arg(long, default_value_t = 4096)]
        d_in: usize,
        #[arg(long, default_value_t = 4096)]
        d_out: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Median timings of dense, sparse, tiled and fused kernels.
    BenchSpmm {
        #[arg(long, default_value = "2:4")]
        pattern: NmPattern,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 512)]
        d_in: usize,
        #[arg(long, default_value_t = 1024)]
        d_out: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Runs [2:4-2:4], [2:4-2:8] and [2:8-2:4] variants of one config.
    SweepMixedNm {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// A failure with its exit code and machine-readable kind.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io",
            message: format!("{context}: {e}"),
        }
    }

    fn json(&self) -> String {
        serde_json::json!({ "error": self.kind, "code": self.code, "message": self.message }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config { .. } | Error::PatternSyntax(_) | Error::InvalidPattern { .. } | Error::NotDivisible { .. } => {
                (EXIT_CONFIG, "config")
            }
            Error::Divergence { .. } => (EXIT_DIVERGENCE, "divergence"),
            Error::Io(_) => (EXIT_IO, "io"),
            _ => (EXIT_OTHER, "runtime"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>, CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| CliError {
            code: EXIT_OTHER,
            kind: "runtime",
            message: e.to_string(),
        })
}

/// Executes `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::config(first).json());
            return EXIT_CONFIG;
        }
    };
    let outcome = thread_pool().and_then(|pool| match pool {
        Some(pool) => pool.install(|| commands::execute(cli.command)),
        None => commands::execute(cli.command),
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.json());
            e.code
        }
    }
}
