//! Versioned JSON artifact containers. Every saved model or report is
//! wrapped with a schema version, a kind tag, and the config fingerprint
//! that produced it, so stale or mismatched artifacts fail loudly instead
//! of silently evaluating garbage.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::path::Path;

use crate::{HResult, HarnessError};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub struct Artifact<T> {
    pub schema_version: u32,
    pub kind: String,
    pub fingerprint: String,
    pub payload: T,
}

pub fn save_artifact<T: Serialize>(
    path: &Path,
    kind: &str,
    fingerprint: &str,
    payload: &T,
) -> HResult<()> {
    let wrapped = Artifact {
        schema_version: ARTIFACT_VERSION,
        kind: kind.to_string(),
        fingerprint: fingerprint.to_string(),
        payload,
    };
    let text = serde_json::to_string(&wrapped)
        .map_err(|e| HarnessError::Runtime(format!("serialize {kind}: {e}")))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Load and unwrap an artifact, checking kind and schema version. The
/// fingerprint is returned for the caller to compare (commands warn on
/// mismatch rather than refusing, so artifacts can be inspected across
/// config edits).
pub fn load_artifact<T: DeserializeOwned>(path: &Path, kind: &str) -> HResult<(T, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        HarnessError::Runtime(format!("missing artifact {}: {e}", path.display()))
    })?;
    let wrapped: Artifact<T> = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Runtime(format!("corrupt artifact {}: {e}", path.display())))?;
    if wrapped.schema_version != ARTIFACT_VERSION {
        return Err(HarnessError::Runtime(format!(
            "artifact {} has schema {} (expected {ARTIFACT_VERSION})",
            path.display(),
            wrapped.schema_version
        )));
    }
    if wrapped.kind != kind {
        return Err(HarnessError::Runtime(format!(
            "artifact {} has kind '{}' (expected '{kind}')",
            path.display(),
            wrapped.kind
        )));
    }
    Ok((wrapped.payload, wrapped.fingerprint))
}

/// Well-known artifact locations under an output directory.
pub struct Paths {
    pub root: std::path::PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Paths {
            root: root.to_path_buf(),
        }
    }
    pub fn dataset_dir(&self) -> std::path::PathBuf {
        self.root.join("dataset")
    }
    pub fn manifest(&self) -> std::path::PathBuf {
        self.dataset_dir().join("manifest.json")
    }
    pub fn backbone(&self) -> std::path::PathBuf {
        self.root.join("backbone.json")
    }
    pub fn merged_backbone(&self) -> std::path::PathBuf {
        self.root.join("merged_backbone.json")
    }
    pub fn eclm_report(&self) -> std::path::PathBuf {
        self.root.join("eclm_report.json")
    }
    pub fn vae(&self) -> std::path::PathBuf {
        self.root.join("vae.json")
    }
    pub fn vae_curve(&self) -> std::path::PathBuf {
        self.root.join("vae_curve.csv")
    }
    pub fn denoiser(&self) -> std::path::PathBuf {
        self.root.join("denoiser.json")
    }
    pub fn denoiser_curve(&self) -> std::path::PathBuf {
        self.root.join("denoiser_curve.csv")
    }
    pub fn cka_csv(&self) -> std::path::PathBuf {
        self.root.join("cka.csv")
    }
    pub fn cka_heatmap(&self) -> std::path::PathBuf {
        self.root.join("cka.pgm")
    }
    pub fn ledger_jsonl(&self) -> std::path::PathBuf {
        self.root.join("ledger.jsonl")
    }
    pub fn ledger_csv(&self) -> std::path::PathBuf {
        self.root.join("ledger.csv")
    }
    pub fn stage_table(&self) -> std::path::PathBuf {
        self.root.join("stage_table.txt")
    }
    pub fn scatter_csv(&self) -> std::path::PathBuf {
        self.root.join("scatter.csv")
    }
    pub fn scatter_svg(&self) -> std::path::PathBuf {
        self.root.join("scatter.svg")
    }
    pub fn summary(&self) -> std::path::PathBuf {
        self.root.join("summary.txt")
    }
    pub fn ablate_csv(&self, knob: &str) -> std::path::PathBuf {
        self.root.join(format!("ablate_{knob}.csv"))
    }
}
