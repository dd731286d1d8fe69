//! `commutant`: drivers for the commutator constructions in `commutant-core`.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use report::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "commutant",
    version,
    about = "Explicit commutator factorizations with residual certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the shift identities of a decomposition on random probes.
    VerifyIdentities {
        /// scheme name (dyadic, cantor) or a decomp/v1 file
        #[arg(long, default_value = "dyadic")]
        decomp: String,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, default_value_t = 16)]
        nmax: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Factor an operator from a sparse-op/v1 file as a commutator.
    Factor {
        #[arg(long)]
        op: PathBuf,
        #[arg(long, default_value = "dyadic")]
        decomp: String,
        #[arg(long, value_enum)]
        method: Method,
        /// easy: left|right; corner: left|right; side: tp|pt
        #[arg(long)]
        side: Option<String>,
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// norm for coarsen and compact: 1 or inf
        #[arg(long, default_value = "1")]
        p: String,
        #[arg(long)]
        probes: Option<usize>,
        /// witness/v1 output
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run an end-to-end construction on generated inputs.
    Demo {
        #[arg(long, value_enum)]
        name: DemoName,
        #[arg(long, default_value_t = 12)]
        blocks: usize,
        #[arg(long, default_value_t = 2)]
        block_dim: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a seeded test operator.
    Gen {
        #[arg(long, value_enum)]
        kind: GenKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        decay: f64,
        /// index bound of the generated operator
        #[arg(long, default_value_t = 32)]
        support: usize,
        /// entries drawn for blocksparse
        #[arg(long, default_value_t = 40)]
        nnz: usize,
        /// integer entries for blocksparse
        #[arg(long)]
        integer: bool,
        /// defaults to standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Independent oracles for cross-checking library values.
    Oracle {
        #[arg(long, value_enum)]
        name: OracleName,
        /// sparse-op/v1 input (series-direct, trace)
        #[arg(long)]
        op: Option<PathBuf>,
        /// JSON object with row-major A2, D2, B, C (sylvester-dense)
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "dyadic")]
        decomp: String,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Method {
    Easy,
    Coarsen,
    Compact,
    Corner,
    Side,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DemoName {
    Diagcomm,
    Mainaux,
    Ell1Pipeline,
    DirectSum,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenKind {
    Compactlike,
    Blocksparse,
    Permutation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OracleName {
    SylvesterDense,
    SeriesDirect,
    Trace,
}

const DEFAULT_PROBES: usize = 128;

fn probe_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("COMMUTANT_PROBES") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("COMMUTANT_PROBES must be a count, got `{v}`"))),
        Err(_) => Ok(DEFAULT_PROBES),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match cli.command {
        Command::VerifyIdentities {
            decomp,
            probes,
            nmax,
            seed,
            report,
        } => commands::verify_identities(
            argv,
            &decomp,
            probe_count(probes)?,
            nmax,
            seed,
            report.as_deref(),
        ),
        Command::Factor {
            op,
            decomp,
            method,
            side,
            eps,
            tol,
            p,
            probes,
            out,
            report,
        } => commands::factor(commands::FactorArgs {
            argv,
            op,
            decomp,
            method,
            side,
            eps,
            tol,
            p,
            probes: probe_count(probes)?,
            out,
            report,
        }),
        Command::Demo {
            name,
            blocks,
            block_dim,
            seed,
            tol,
            out,
            report,
        } => commands::demo(
            argv,
            name,
            blocks,
            block_dim,
            seed,
            tol,
            out.as_deref(),
            report.as_deref(),
        ),
        Command::Gen {
            kind,
            seed,
            decay,
            support,
            nnz,
            integer,
            out,
        } => commands::gen(kind, seed, decay, support, nnz, integer, out.as_deref()),
        Command::Oracle {
            name,
            op,
            input,
            decomp,
            probes,
            report,
        } => commands::oracle(
            argv,
            name,
            op.as_deref(),
            input.as_deref(),
            &decomp,
            probe_count(probes)?,
            report.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
