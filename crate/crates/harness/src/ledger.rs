//! Append-only run ledger. Every evaluation (or stage failure) appends one
//! JSONL record and one CSV row; nothing is ever rewritten in place.
//! Timestamps live only here — derived reports are regenerable byte-for-byte
//! from the ledger contents minus the clock.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use poselab_core::metrics::EvalReport;

use crate::{HResult, HarnessError};

pub const LEDGER_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub artifact_version: u32,
    /// Fingerprint of the config that produced this row.
    pub fingerprint: String,
    pub stage: String,
    pub eval_seed: u64,
    /// "ok" or "failed".
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    /// Seconds since the Unix epoch at append time.
    pub timestamp_s: u64,
}

impl LedgerRecord {
    pub fn ok(fingerprint: &str, eval_seed: u64, report: EvalReport) -> Self {
        LedgerRecord {
            artifact_version: LEDGER_VERSION,
            fingerprint: fingerprint.to_string(),
            stage: report.stage.clone(),
            eval_seed,
            status: "ok".into(),
            error: None,
            report: Some(report),
            timestamp_s: now_s(),
        }
    }

    pub fn failed(fingerprint: &str, eval_seed: u64, stage: &str, error: &str) -> Self {
        LedgerRecord {
            artifact_version: LEDGER_VERSION,
            fingerprint: fingerprint.to_string(),
            stage: stage.to_string(),
            eval_seed,
            status: "failed".into(),
            error: Some(error.to_string()),
            report: None,
            timestamp_s: now_s(),
        }
    }
}

fn now_s() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

const CSV_HEADER: &str =
    "fingerprint,stage,eval_seed,status,mpjpe,pa_mpjpe,pve,accel,throughput_fps,timestamp_s";

fn csv_row(r: &LedgerRecord) -> String {
    match &r.report {
        Some(rep) => format!(
            "{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.6},{}",
            r.fingerprint,
            r.stage,
            r.eval_seed,
            r.status,
            rep.mpjpe,
            rep.pa_mpjpe,
            rep.pve,
            rep.accel,
            rep.throughput_fps,
            r.timestamp_s
        ),
        None => format!(
            "{},{},{},{},,,,,,{}",
            r.fingerprint, r.stage, r.eval_seed, r.status, r.timestamp_s
        ),
    }
}

/// Append records to both ledger files, creating them (with a CSV header) on
/// first use. Appends are serialized by taking the whole batch at once.
pub fn append(dir: &Path, records: &[LedgerRecord]) -> HResult<()> {
    std::fs::create_dir_all(dir)?;
    let paths = crate::checkpoint::Paths::new(dir);
    let mut jsonl = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(paths.ledger_jsonl())?;
    let csv_path = paths.ledger_csv();
    let write_header = !csv_path.exists();
    let mut csv = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(csv_path)?;
    if write_header {
        writeln!(csv, "{CSV_HEADER}")?;
    }
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| HarnessError::Runtime(format!("serialize ledger record: {e}")))?;
        writeln!(jsonl, "{line}")?;
        writeln!(csv, "{}", csv_row(r))?;
    }
    Ok(())
}

/// Read every record in append order.
pub fn read(dir: &Path) -> HResult<Vec<LedgerRecord>> {
    let path = crate::checkpoint::Paths::new(dir).ledger_jsonl();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| HarnessError::Runtime(format!("no ledger at {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LedgerRecord = serde_json::from_str(line)
            .map_err(|e| HarnessError::Runtime(format!("ledger line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
