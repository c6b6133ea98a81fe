//! Experiment configuration: one JSON document drives every command. The
//! defaults embed the reference operating point (merge budget τ = 0.1, token
//! schedule 3 × 40 down to a floor of 90, diffusion T = 1000 with
//! β ∈ [0.00085, 0.012], hybrid loss λ1 = λ2 = 1) on desk-scale model
//! dimensions. A stable content fingerprint keys ledger rows and artifacts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use poselab_core::backbone::ModelConfig;
use poselab_core::diffusion::{DenoiserConfig, DenoiserTrainOpts};
use poselab_core::layer_merge::EclmConfig;
use poselab_core::pose::SynthScene;
use poselab_core::token_merge::MergeSchedule;
use poselab_core::vae::{VaeConfig, VaeTrainOpts};

use crate::{HResult, HarnessError};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// 48² px, 6-px patches → 64 tokens per frame.
    Toy64,
    /// 112² px, 8-px patches → 196 tokens per frame.
    Toy196,
}

impl SceneKind {
    pub fn scene(&self, seed: u64) -> SynthScene {
        match self {
            SceneKind::Toy64 => SynthScene::toy(seed),
            SceneKind::Toy196 => SynthScene::toy_196(seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneKind,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Clips held out from all training, used for VAE validation curves.
    pub holdout_clips: usize,
    pub frames: usize,
    /// Scene seeds are `base_seed + clip index` across the three splits.
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub depth: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadFitSpec {
    /// Ridge strength for the closed-form head fit; keep ≥ O(1) so the fit
    /// stays well-conditioned and small feature shifts stay small errors.
    pub ridge: f64,
    /// Cap on frames used for the fit.
    pub max_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EclmSpec {
    pub tau: f64,
    /// Target calibration-set size; frames are strided evenly across clips.
    pub calibration_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomeSpec {
    pub enabled: bool,
    /// Number of leading layers that merge tokens (l).
    pub layers: usize,
    /// Merge budget per merging layer (n_l).
    pub per_layer: usize,
    /// Retention floor (M′): tokens never drop below this count.
    pub floor: usize,
    /// Figure-coverage fraction above which a patch counts as a person token.
    pub mask_threshold: f64,
    /// When false, no token is flagged as person — merging may consume the
    /// figure (the mask-off ablation arm).
    pub protect_person: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_seed: u64,
    /// Train on random kinematic-symmetry images of each clip (time
    /// reversal, lateral mirror, roll flip) to stretch the clip budget.
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_terminal: bool,
    /// Sampling steps at evaluation time (1 = single-step decode).
    pub sample_steps: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub train_seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub augment_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub repetitions: usize,
    pub warmup: usize,
    /// Frames processed per repetition.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub head_fit: HeadFitSpec,
    pub eclm: EclmSpec,
    pub tome: TomeSpec,
    pub vae: VaeSpec,
    pub diffusion: DiffusionSpec,
    pub bench: BenchSpec,
    /// One full evaluation pass per seed (ledger rows = stages × seeds).
    pub eval_seeds: Vec<u64>,
    /// Report raw jitter magnitude instead of acceleration error vs truth.
    pub accel_raw: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec {
                scene: SceneKind::Toy196,
                train_clips: 160,
                eval_clips: 12,
                holdout_clips: 16,
                frames: 36,
                base_seed: 1000,
            },
            model: ModelSpec {
                depth: 8,
                token_dim: 32,
                heads: 4,
                ff_dim: 64,
                feature_dim: 16,
                seed: 7,
            },
            head_fit: HeadFitSpec {
                ridge: 1.0,
                max_frames: 1500,
            },
            eclm: EclmSpec {
                tau: 0.1,
                calibration_frames: 120,
            },
            tome: TomeSpec {
                enabled: true,
                layers: 3,
                per_layer: 40,
                floor: 90,
                mask_threshold: 0.5,
                protect_person: true,
            },
            vae: VaeSpec {
                latent_tokens: 4,
                latent_dim: 32,
                layers: 3,
                heads: 4,
                ff_dim: 64,
                dropout: 0.1,
                kl_weight: 1e-4,
                seed: 11,
                epochs: 160,
                lr: 1e-3,
                batch: 4,
                train_seed: 12,
                augment: true,
            },
            diffusion: DiffusionSpec {
                t_steps: 1000,
                beta_start: 0.00085,
                beta_end: 0.012,
                zero_terminal: true,
                sample_steps: 1,
                layers: 5,
                heads: 4,
                ff_dim: 64,
                dropout: 0.001,
                seed: 13,
                epochs: 120,
                lr: 1e-3,
                weight_decay: 1e-2,
                batch: 16,
                train_seed: 14,
                lambda1: 1.0,
                lambda2: 1.0,
                augment_prob: 0.5,
            },
            bench: BenchSpec {
                repetitions: 5,
                warmup: 2,
                frames: 72,
            },
            eval_seeds: vec![0],
            accel_raw: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> HResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> HResult<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Runtime(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> HResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let d = &self.dataset;
        if d.train_clips == 0 || d.eval_clips == 0 || d.frames < 3 {
            return Err(HarnessError::Config(
                "dataset needs train_clips ≥ 1, eval_clips ≥ 1, frames ≥ 3".into(),
            ));
        }
        let scene = d.scene.scene(0);
        self.model_config()
            .validate()
            .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        self.vae_config()
            .validate()
            .map_err(|e| HarnessError::Config(format!("vae: {e}")))?;
        self.denoiser_config()
            .validate()
            .map_err(|e| HarnessError::Config(format!("denoiser: {e}")))?;
        self.eclm_config()
            .validate()
            .map_err(|e| HarnessError::Config(format!("eclm: {e}")))?;
        if self.tome.enabled {
            self.merge_schedule()
                .validate()
                .map_err(|e| HarnessError::Config(format!("tome: {e}")))?;
            if scene.tokens() < self.tome.floor {
                return Err(HarnessError::Config(format!(
                    "tome floor {} exceeds scene token count {}",
                    self.tome.floor,
                    scene.tokens()
                )));
            }
            if !(0.0..=1.0).contains(&self.tome.mask_threshold) {
                return Err(HarnessError::Config("mask_threshold outside [0, 1]".into()));
            }
        }
        if !(0.0 < self.diffusion.beta_start
            && self.diffusion.beta_start < self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return Err(HarnessError::Config(
                "need 0 < beta_start < beta_end < 1".into(),
            ));
        }
        if self.diffusion.sample_steps == 0 || self.diffusion.sample_steps > self.diffusion.t_steps
        {
            return Err(HarnessError::Config(
                "sample_steps must lie in 1..=t_steps".into(),
            ));
        }
        if self.bench.repetitions == 0 || self.bench.frames == 0 {
            return Err(HarnessError::Config(
                "bench needs repetitions ≥ 1 and frames ≥ 1".into(),
            ));
        }
        if self.eval_seeds.is_empty() {
            return Err(HarnessError::Config("eval_seeds must be non-empty".into()));
        }
        if self.eclm.calibration_frames == 0 {
            return Err(HarnessError::Config("calibration_frames must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Stable hex fingerprint of the canonical JSON form (sorted keys).
    pub fn fingerprint(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = serde_json::to_string(&value).expect("value serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn fingerprint_short(&self) -> String {
        self.fingerprint()[..12].to_string()
    }

    pub fn scene_for(&self, seed: u64) -> SynthScene {
        self.dataset.scene.scene(seed)
    }

    pub fn model_config(&self) -> ModelConfig {
        let scene = self.dataset.scene.scene(0);
        ModelConfig {
            depth: self.model.depth,
            token_dim: self.model.token_dim,
            heads: self.model.heads,
            ff_dim: self.model.ff_dim,
            tokens_per_frame: scene.tokens(),
            feature_dim: self.model.feature_dim,
            seed: self.model.seed,
        }
    }

    pub fn eclm_config(&self) -> EclmConfig {
        EclmConfig {
            tau: self.eclm.tau,
            calibration_frames: self.eclm.calibration_frames,
        }
    }

    pub fn merge_schedule(&self) -> MergeSchedule {
        MergeSchedule {
            layers: self.tome.layers,
            per_layer: self.tome.per_layer,
            floor: self.tome.floor,
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        let scene = self.dataset.scene.scene(0);
        VaeConfig {
            frames: self.dataset.frames,
            latent_tokens: self.vae.latent_tokens,
            latent_dim: self.vae.latent_dim,
            layers: self.vae.layers,
            heads: self.vae.heads,
            ff_dim: self.vae.ff_dim,
            dropout: self.vae.dropout,
            kl_weight: self.vae.kl_weight,
            n_joints: scene.n_joints(),
            n_twists: scene.n_twists(),
            seed: self.vae.seed,
        }
    }

    pub fn vae_train_opts(&self) -> VaeTrainOpts {
        VaeTrainOpts {
            epochs: self.vae.epochs,
            lr: self.vae.lr,
            batch: self.vae.batch,
            seed: self.vae.train_seed,
            augment: self.vae.augment,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.diffusion.layers,
            heads: self.diffusion.heads,
            dim: self.vae.latent_dim,
            ff_dim: self.diffusion.ff_dim,
            dropout: self.diffusion.dropout,
            cond_dim: self.model.feature_dim,
            cond_frames: self.dataset.frames,
            latent_tokens: self.vae.latent_tokens,
            seed: self.diffusion.seed,
        }
    }

    pub fn denoiser_train_opts(&self) -> DenoiserTrainOpts {
        DenoiserTrainOpts {
            epochs: self.diffusion.epochs,
            lr: self.diffusion.lr,
            weight_decay: self.diffusion.weight_decay,
            batch: self.diffusion.batch,
            seed: self.diffusion.train_seed,
            lambda1: self.diffusion.lambda1,
            lambda2: self.diffusion.lambda2,
            augment_prob: self.diffusion.augment_prob,
        }
    }
}
