//! The `c3` command line: classification, CU planning, DMA transfer plans,
//! strategy sweeps and penalty calibration. All inputs and outputs are files;
//! omitted inputs fall back to the bundled MI300X defaults.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod io;

pub const EXIT_IO: u8 = 2;
pub const EXIT_UNKNOWN: u8 = 3;
pub const EXIT_INVALID: u8 = 4;
pub const EXIT_FIT: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "c3", version, about = "Model concurrent GEMM + collective execution on a GPU node")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label each scenario G-long, C-long or GC-equal and report its ideal speedup
    Classify(ClassifyArgs),
    /// Show the CU allocation a strategy picks, with every candidate considered
    Plan(PlanArgs),
    /// Build or check a DMA transfer plan and print its cost
    ConcclPlan(ConcclPlanArgs),
    /// Simulate every scenario under every strategy
    Sweep(SweepArgs),
    /// Fit co-run penalties to measured speedups
    Calibrate(CalibrateArgs),
}

/// Model inputs. Anything omitted uses the bundled MI300X defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Inputs {
    /// Machine descriptor (JSON)
    #[arg(long, value_name = "PATH")]
    pub machine: Option<PathBuf>,
    /// Scenario dataset (JSON)
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Slowdown tables (CSV: kernel_class,cus,slowdown)
    #[arg(long, value_name = "PATH")]
    pub tables: Option<PathBuf>,
    /// Model parameters: efficiency, overheads, penalties (JSON)
    #[arg(long, value_name = "PATH")]
    pub params: Option<PathBuf>,
    /// Remove all slowdowns, penalties and overheads
    #[arg(long)]
    pub zero_interference: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    #[value(alias = "structured-text")]
    Json,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Output {
    /// Write the result here instead of stdout (atomic replace)
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Selection {
    /// Scenario id, optionally as `id/collective`
    #[arg(long, value_name = "ID")]
    pub scenario: Option<String>,
    /// Keep only `all-gather` or `all-to-all` scenarios
    #[arg(long, value_name = "KIND")]
    pub filter_collective: Option<String>,
    /// Keep only `G-long`, `C-long` or `GC-equal` scenarios
    #[arg(long, value_name = "LABEL")]
    pub filter_taxonomy: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub selection: Selection,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Scenario id, optionally as `id/collective`
    #[arg(long, value_name = "ID")]
    pub scenario: String,
    /// Restrict to one collective when the id has both
    #[arg(long, value_name = "KIND")]
    pub filter_collective: Option<String>,
    #[arg(long, default_value = "c3_rp")]
    pub strategy: String,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args)]
pub struct ConcclPlanArgs {
    /// `all-gather` or `all-to-all`
    #[arg(long, required_unless_present = "validate")]
    pub kind: Option<String>,
    /// Participating GPUs
    #[arg(long, required_unless_present = "validate")]
    pub ranks: Option<u32>,
    /// Collective payload, e.g. 896MB, 64MiB or a byte count
    #[arg(long, required_unless_present = "validate")]
    pub payload: Option<String>,
    /// Check and cost an existing plan file (JSON) instead of building one
    #[arg(long, value_name = "PATH", conflicts_with_all = ["kind", "ranks", "payload"])]
    pub validate: Option<PathBuf>,
    /// Machine descriptor (JSON)
    #[arg(long, value_name = "PATH")]
    pub machine: Option<PathBuf>,
    /// Model parameters (JSON); supplies the link efficiency
    #[arg(long, value_name = "PATH")]
    pub params: Option<PathBuf>,
    /// Drop launch and sync overheads
    #[arg(long)]
    pub zero_interference: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub selection: Selection,
    /// Strategies to run, comma separated, or `all`
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub strategy: Vec<String>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Measured speedups (CSV: scenario_id,strategy,measured_speedup)
    #[arg(long, value_name = "PATH")]
    pub measured: PathBuf,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Fitted parameters go to --out; the residual report uses --format
    #[command(flatten)]
    pub output: Output,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn io(error: anyhow::Error) -> Self {
        Self { code: EXIT_IO, error }
    }

    pub fn unknown(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_UNKNOWN,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn invalid(msg: impl fmt::Display) -> Self {
        Self {
            code: EXIT_INVALID,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn context(self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            code: self.code,
            error: self.error.context(ctx),
        }
    }
}

impl From<c3_core::Error> for Failure {
    fn from(e: c3_core::Error) -> Self {
        let code = match e {
            c3_core::Error::Calibration(_) => EXIT_FIT,
            _ => EXIT_INVALID,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Run one parsed command. Results go to `stdout` (or `--out`), notes to
/// `stderr`.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Classify(a) => commands::classify(a, stdout, stderr),
        Command::Plan(a) => commands::plan(a, stdout),
        Command::ConcclPlan(a) => commands::conccl_plan(a, stdout),
        Command::Sweep(a) => commands::sweep(a, stdout),
        Command::Calibrate(a) => commands::calibrate(a, stdout, stderr),
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap's own convention: usage errors exit 2, help exits 0.
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_IO;
            }
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
    };
    match run(&cli, stdout, stderr) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            f.code
        }
    }
}
