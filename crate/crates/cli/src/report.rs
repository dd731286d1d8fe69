use std::fmt;
use std::path::Path;

use commutant_core::Error;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Io(String),
    Usage(String),
    /// the run completed but a residual exceeded its tolerance
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Usage(_) => 2,
            CliError::Verification(_) => 1,
            CliError::Core(e) => match e {
                Error::Parse(_) | Error::InvalidInput(_) => 2,
                Error::Precondition { .. }
                | Error::MissingSeriesCertificate(_)
                | Error::UnsupportedNorm(_) => 3,
                Error::Margin { .. } => 4,
                Error::Singular { .. } => 5,
                Error::NotConverged { .. } | Error::Relation { .. } => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(
                e @ Error::Margin {
                    required_blocks, ..
                },
            ) => {
                write!(f, "{e}; rerun with --blocks {required_blocks} or more")
            }
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn read_json(path: &Path, report: &mut RunReport) -> CliResult<Value> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    report
        .inputs
        .push((path.display().to_string(), hex_digest(&bytes)));
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Core(Error::Parse(format!("{}: {e}", path.display()))))
}

pub fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json values serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Machine-readable record of one run. Deterministic given the command line
/// and inputs, so wall-clock timings go to standard output only.
#[derive(Debug, Default)]
pub struct RunReport {
    pub command: Vec<String>,
    /// (path, sha256) of every file read
    pub inputs: Vec<(String, String)>,
    pub stages: Vec<(String, Value)>,
    /// probe index → residual
    pub residuals: Vec<(usize, f64)>,
    pub tolerance: f64,
    pub certificates: Option<Value>,
    pub verdict: String,
}

impl RunReport {
    pub fn new(command: Vec<String>) -> Self {
        RunReport {
            command,
            ..Default::default()
        }
    }

    pub fn stage(&mut self, name: &str, summary: Value) {
        self.stages.push((name.to_string(), summary));
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.1).fold(0.0, f64::max)
    }

    /// Sets the verdict from the residual table.
    pub fn judge(&mut self, tol: f64) -> bool {
        self.tolerance = tol;
        let pass = self.residuals.iter().all(|r| r.1 <= tol);
        self.verdict = if pass { "pass" } else { "fail" }.into();
        pass
    }

    pub fn to_json(&self) -> Value {
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|(p, d)| json!({"path": p, "sha256": d}))
            .collect();
        let stages: Vec<Value> = self
            .stages
            .iter()
            .map(|(n, s)| json!({"stage": n, "summary": s}))
            .collect();
        let residuals: Vec<Value> = self.residuals.iter().map(|(k, r)| json!([k, r])).collect();
        json!({
            "format": "run-report/v1",
            "command": self.command,
            "inputs": inputs,
            "stages": stages,
            "residuals": residuals,
            "max_residual": self.max_residual(),
            "tolerance": self.tolerance,
            "certificates": self.certificates.clone().unwrap_or(Value::Null),
            "verdict": self.verdict,
        })
    }

    pub fn print_summary(&self) {
        for (name, summary) in &self.stages {
            println!("  {name}: {summary}");
        }
        if !self.residuals.is_empty() {
            println!(
                "  residuals: {} probes, max {:e} (tol {:e})",
                self.residuals.len(),
                self.max_residual(),
                self.tolerance
            );
        }
        println!("verdict: {}", self.verdict);
    }
}
