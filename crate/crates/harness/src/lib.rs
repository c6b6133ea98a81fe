//! Experiment harness for the pose lab: configuration, dataset generation,
//! pipeline orchestration (baseline → layer merge → token merge → diffusion
//! decode), ablation sweeps, run ledger, and report emission. The `poselab`
//! binary is a thin CLI over this library so tests can drive every command
//! in-process.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ledger;
pub mod pipeline;
pub mod report;
pub mod stages;

use std::fmt;

/// Harness-level failure split by exit code: configuration problems (exit 1)
/// versus runtime failures such as missing artifacts or diverged training
/// (exit 2).
#[derive(Debug)]
pub enum HarnessError {
    Config(String),
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(m) => write!(f, "config error: {m}"),
            HarnessError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<poselab_core::LabError> for HarnessError {
    fn from(e: poselab_core::LabError) -> Self {
        HarnessError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Runtime(format!("io: {e}"))
    }
}

pub type HResult<T> = std::result::Result<T, HarnessError>;
