//! Pipeline driver: a single config file in, staged artifacts out.
//!
//! Stages run in a fixed order (panel decomposition, text association,
//! region mining, box cleanup, corpus assembly, pretraining, retrieval
//! evaluation, reporting), each reading the previous stage's files from the
//! work directory and writing its own. Per-figure outputs are skipped when
//! already present, so an interrupted run resumes where it stopped. Every
//! stage finishes by rewriting `run-manifest.json` with the config digest,
//! the seeds, and a SHA-256 per artifact, which makes byte-level determinism
//! checkable from the outside.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub mod config;
pub mod fixtures;
pub mod stages;

pub use config::{load_config, RunConfig};

use figmine_core::corpus::ManifestError;
use figmine_core::eval::EvalError;
use figmine_core::geometry::GeometryError;
use figmine_core::lvlm::LvlmError;
use figmine_core::synth::SynthError;
use figmine_core::train::TrainError;

/// Errors surface as one of three exit codes: 1 for configuration problems,
/// 2 for data problems (malformed or missing stage inputs), 3 for endpoint
/// problems (transport failures, missing mock fixtures).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Endpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Endpoint(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Endpoint(_) => "endpoint",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Endpoint(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<LvlmError> for CliError {
    fn from(e: LvlmError) -> Self {
        match &e {
            LvlmError::Transport { .. } | LvlmError::Auth(_) | LvlmError::MissingFixture { .. } => {
                CliError::Endpoint(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::BadCycle(_) | TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::BadFraction(_) | EvalError::EmptySide { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One structured log line on stderr. Timing stays out of every artifact
/// file, so it is free to appear here.
#[derive(Serialize)]
struct LogEvent<'a> {
    stage: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    figure_id: Option<&'a str>,
    event: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ms: Option<u128>,
}

pub fn log_event(stage: &str, figure_id: Option<&str>, event: &str, detail: Option<&str>, ms: Option<u128>) {
    let line = LogEvent { stage, figure_id, event, detail, ms };
    match serde_json::to_string(&line) {
        Ok(json) => eprintln!("{json}"),
        Err(_) => eprintln!("{{\"stage\":\"{stage}\",\"event\":\"log-serialize-failed\"}}"),
    }
}
