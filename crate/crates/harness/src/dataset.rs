//! Synthetic dataset generation and loading. Clips are generated
//! deterministically from per-clip scene seeds; clip files plus a checksummed
//! manifest land under `<output>/dataset/`. Loading regenerates the
//! renderings (patch features and person masks) from the same seeds — they
//! are pure functions of the scene — and verifies file checksums so a
//! tampered or stale dataset is caught before any training run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use ndarray::Array2;
use poselab_core::pose::{generate_clip, MotionClip};
use poselab_core::token_merge::MaskGrid;

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::{HResult, HarnessError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub scene_seed: u64,
    pub frames: usize,
    /// sha256 hex of the clip file bytes.
    pub checksum: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub train: Vec<ClipEntry>,
    pub eval: Vec<ClipEntry>,
    pub holdout: Vec<ClipEntry>,
}

/// A clip together with its per-frame renderings.
#[derive(Debug)]
pub struct LoadedClip {
    pub clip: MotionClip,
    /// One N × 4 patch-statistics matrix per frame.
    pub features: Vec<Array2<f64>>,
    /// One figure mask per frame.
    pub masks: Vec<MaskGrid>,
    pub scene_seed: u64,
}

#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<LoadedClip>,
    pub eval: Vec<LoadedClip>,
    pub holdout: Vec<LoadedClip>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn split_seeds(spec: &DatasetSpec) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let b = spec.base_seed;
    let t = spec.train_clips as u64;
    let e = spec.eval_clips as u64;
    let h = spec.holdout_clips as u64;
    (
        (b..b + t).collect(),
        (b + t..b + t + e).collect(),
        (b + t + e..b + t + e + h).collect(),
    )
}

/// Generate the dataset on disk. Refuses to overwrite an existing manifest
/// unless `force` is set. Byte-identical for identical spec (no timestamps,
/// relative paths only).
pub fn generate(config: &ExperimentConfig, force: bool) -> HResult<Manifest> {
    let dir = crate::checkpoint::Paths::new(&config.output_dir).dataset_dir();
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(HarnessError::Runtime(format!(
            "dataset already exists at {} (use --force to regenerate)",
            manifest_path.display()
        )));
    }
    std::fs::create_dir_all(&dir)?;
    let spec = &config.dataset;
    let (ts, es, hs) = split_seeds(spec);
    let write_split = |prefix: &str, seeds: &[u64]| -> HResult<Vec<ClipEntry>> {
        let mut entries = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let scene = spec.scene.scene(seed);
            let (clip, _, _) = generate_clip(&scene, spec.frames)?;
            let name = format!("{prefix}_{i:03}.json");
            let bytes = serde_json::to_vec(&clip)
                .map_err(|e| HarnessError::Runtime(format!("serialize clip: {e}")))?;
            std::fs::write(dir.join(&name), &bytes)?;
            entries.push(ClipEntry {
                path: name,
                scene_seed: seed,
                frames: spec.frames,
                checksum: sha256_hex(&bytes),
            });
        }
        Ok(entries)
    };
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        spec: spec.clone(),
        train: write_split("train", &ts)?,
        eval: write_split("eval", &es)?,
        holdout: write_split("holdout", &hs)?,
    };
    let bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| HarnessError::Runtime(format!("serialize manifest: {e}")))?;
    std::fs::write(&manifest_path, bytes)?;
    Ok(manifest)
}

fn load_split(dir: &Path, spec: &DatasetSpec, entries: &[ClipEntry]) -> HResult<Vec<LoadedClip>> {
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let path = dir.join(&entry.path);
        let bytes = std::fs::read(&path)
            .map_err(|e| HarnessError::Runtime(format!("missing clip {}: {e}", path.display())))?;
        if sha256_hex(&bytes) != entry.checksum {
            return Err(HarnessError::Runtime(format!(
                "checksum mismatch for {}",
                path.display()
            )));
        }
        let stored: MotionClip = serde_json::from_slice(&bytes)
            .map_err(|e| HarnessError::Runtime(format!("corrupt clip {}: {e}", path.display())))?;
        // renderings are pure functions of (scene seed, frames): regenerate
        let scene = spec.scene.scene(entry.scene_seed);
        let (clip, features, masks) = generate_clip(&scene, entry.frames)?;
        if stored.frames.len() != clip.frames.len() {
            return Err(HarnessError::Runtime(format!(
                "clip {} does not match its scene seed",
                path.display()
            )));
        }
        out.push(LoadedClip {
            clip,
            features,
            masks,
            scene_seed: entry.scene_seed,
        });
    }
    Ok(out)
}

/// Load (and re-render) the dataset, validating every checksum.
pub fn load(config: &ExperimentConfig) -> HResult<Dataset> {
    let dir = crate::checkpoint::Paths::new(&config.output_dir).dataset_dir();
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        HarnessError::Runtime(format!(
            "no dataset at {} (run gen-data first): {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Runtime(format!("corrupt manifest: {e}")))?;
    if manifest.schema_version != MANIFEST_VERSION {
        return Err(HarnessError::Runtime(format!(
            "manifest schema {} unsupported",
            manifest.schema_version
        )));
    }
    if manifest.spec != config.dataset {
        return Err(HarnessError::Runtime(
            "dataset on disk was generated from a different dataset spec".into(),
        ));
    }
    Ok(Dataset {
        train: load_split(&dir, &manifest.spec, &manifest.train)?,
        eval: load_split(&dir, &manifest.spec, &manifest.eval)?,
        holdout: load_split(&dir, &manifest.spec, &manifest.holdout)?,
    })
}

/// Generate the dataset if absent, then load it.
pub fn ensure(config: &ExperimentConfig) -> HResult<Dataset> {
    let manifest = crate::checkpoint::Paths::new(&config.output_dir).manifest();
    if !manifest.exists() {
        generate(config, false)?;
    }
    load(config)
}
