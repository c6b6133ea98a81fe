//! Stage machinery shared by the pipeline, ablation sweeps, and benchmarks:
//! backbone construction and head fitting, calibration sampling, layer-merge
//! compression, per-clip inference with and without token merging, diffusion
//! decoding, and the metric/throughput evaluation for each stage.

use ndarray::{Array1, Array2};

use poselab_core::backbone::Backbone;
use poselab_core::diffusion::{sample, Denoiser, DenoiserEpochLoss, DiffusionSchedule};
use poselab_core::layer_merge::{eclm_search, sample_calibration, EclmReport};
use poselab_core::metrics::{
    accel_error, accel_magnitude, hardware_fingerprint, measure_throughput, mpjpe_clip,
    pa_mpjpe_clip, pve_analog, EvalReport, SkinSpec, ThreadMode,
};
use poselab_core::pose::PoseFrame;
use poselab_core::token_merge::{tokenize_mask, MergeSchedule, TokenState};
use poselab_core::vae::{train_vae, EpochLoss, MotionVae};

use crate::config::{ExperimentConfig, TomeSpec};
use crate::dataset::{Dataset, LoadedClip};
use crate::{HResult, HarnessError};

/// Stage labels in pipeline order.
pub const STAGE_BASELINE: &str = "baseline";
pub const STAGE_ECLM: &str = "eclm";
pub const STAGE_ECLM_TOME: &str = "eclm+tome";
pub const STAGE_FULL: &str = "eclm+tome+diffusion";
pub const STAGE_LABELS: [&str; 4] = [STAGE_BASELINE, STAGE_ECLM, STAGE_ECLM_TOME, STAGE_FULL];

/// Fresh token state for one rendered frame. With person protection off, no
/// token is flagged and merging may touch the figure.
pub fn token_state(clip: &LoadedClip, frame: usize, tome: &TomeSpec) -> HResult<TokenState> {
    let person = if tome.protect_person {
        tokenize_mask(&clip.masks[frame], tome.mask_threshold)?
    } else {
        vec![false; clip.features[frame].nrows()]
    };
    Ok(TokenState::from_features(
        clip.features[frame].clone(),
        person,
    )?)
}

/// Token states for every frame of a clip.
pub fn clip_token_states(clip: &LoadedClip, tome: &TomeSpec) -> HResult<Vec<TokenState>> {
    (0..clip.clip.frames.len())
        .map(|f| token_state(clip, f, tome))
        .collect()
}

/// Build the backbone and fit its feature-to-pose heads on training frames
/// (closed-form ridge regression; evenly strided across clips up to the
/// configured frame cap).
pub fn fit_backbone(config: &ExperimentConfig, dataset: &Dataset) -> HResult<Backbone> {
    let scene = config.scene_for(0);
    let mut backbone = Backbone::new(config.model_config(), scene.n_joints(), scene.n_twists())?;
    let total: usize = dataset.train.iter().map(|c| c.clip.frames.len()).sum();
    let budget = config.head_fit.max_frames.min(total).max(1);
    let per_clip = budget.div_ceil(dataset.train.len());

    let mut states = Vec::new();
    let mut truths = Vec::new();
    for clip in &dataset.train {
        let len = clip.clip.frames.len();
        let k = per_clip.min(len);
        for i in 0..k {
            let f = i * len / k;
            states.push(token_state(clip, f, &config.tome)?);
            truths.push(clip.clip.frames[f].clone());
        }
    }
    let pairs: Vec<(&TokenState, &PoseFrame)> =
        states.iter().zip(truths.iter()).collect();
    backbone.fit_linear_heads(&pairs, config.head_fit.ridge)?;
    Ok(backbone)
}

/// Calibration frames strided evenly across training clips, targeting the
/// configured count.
pub fn calibration_set(
    config: &ExperimentConfig,
    dataset: &Dataset,
) -> HResult<(Vec<TokenState>, Vec<PoseFrame>)> {
    let lens: Vec<usize> = dataset.train.iter().map(|c| c.clip.frames.len()).collect();
    let per_clip = config
        .eclm
        .calibration_frames
        .div_ceil(lens.len().max(1))
        .max(1);
    let picks = sample_calibration(&lens, per_clip, 0)?;
    let mut states = Vec::new();
    let mut truths = Vec::new();
    for (ci, fi) in picks.into_iter().take(config.eclm.calibration_frames) {
        states.push(token_state(&dataset.train[ci], fi, &config.tome)?);
        truths.push(dataset.train[ci].clip.frames[fi].clone());
    }
    Ok((states, truths))
}

/// Run the error-bounded layer-merge search against the calibration set.
pub fn compress_backbone(
    config: &ExperimentConfig,
    backbone: &Backbone,
    calib: &(Vec<TokenState>, Vec<PoseFrame>),
) -> HResult<(Backbone, EclmReport)> {
    Ok(eclm_search(
        backbone,
        &config.eclm_config(),
        &calib.0,
        &calib.1,
    )?)
}

/// Regression-head pose predictions for every frame of a clip.
pub fn predict_clip(
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
    clip: &LoadedClip,
    tome: &TomeSpec,
) -> HResult<Vec<PoseFrame>> {
    let mut out = Vec::with_capacity(clip.clip.frames.len());
    for f in 0..clip.clip.frames.len() {
        let tokens = token_state(clip, f, tome)?;
        let (_, pose, _) = backbone.forward(&tokens, plan)?;
        out.push(pose);
    }
    Ok(out)
}

/// Per-frame decode features (F × D_F) for a clip — the condition rows the
/// diffusion decoder consumes.
pub fn clip_conditions(
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
    clip: &LoadedClip,
    tome: &TomeSpec,
) -> HResult<Array2<f64>> {
    let frames = clip.clip.frames.len();
    let d_f = backbone.config.feature_dim;
    let mut cond = Array2::zeros((frames, d_f));
    for f in 0..frames {
        let tokens = token_state(clip, f, tome)?;
        let (feature, _, _): (Array1<f64>, _, _) = backbone.forward(&tokens, plan)?;
        cond.row_mut(f).assign(&feature);
    }
    Ok(cond)
}

fn aggregate_metrics(
    label: &str,
    preds: &[Vec<PoseFrame>],
    clips: &[&LoadedClip],
    accel_raw: bool,
    fps: f64,
) -> HResult<EvalReport> {
    let n_joints = clips[0].clip.frames[0].n_joints();
    let skin = SkinSpec::chain_midpoints(n_joints);
    let (mut m, mut pa, mut pv, mut ac) = (0.0, 0.0, 0.0, 0.0);
    for (pred, clip) in preds.iter().zip(clips) {
        let truth = &clip.clip.frames;
        m += mpjpe_clip(pred, truth)?;
        pa += pa_mpjpe_clip(pred, truth)?;
        pv += pve_analog(pred, truth, &skin)?;
        ac += if accel_raw {
            accel_magnitude(pred)?
        } else {
            accel_error(pred, truth)?
        };
    }
    let n = preds.len() as f64;
    let report = EvalReport {
        stage: label.to_string(),
        mpjpe: m / n,
        pa_mpjpe: pa / n,
        pve: pv / n,
        accel: ac / n,
        throughput_fps: fps,
        fingerprint: hardware_fingerprint(),
    };
    report.validate()?;
    Ok(report)
}

/// Evaluate a regression stage: accuracy over the eval clips plus a
/// single-thread throughput measurement of the frame inference path
/// (tokenize → forward → heads).
pub fn eval_regression_stage(
    label: &str,
    config: &ExperimentConfig,
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
    eval_clips: &[LoadedClip],
) -> HResult<EvalReport> {
    if eval_clips.is_empty() {
        return Err(HarnessError::Runtime("no eval clips".into()));
    }
    let tome = &config.tome;
    let mut preds = Vec::new();
    for clip in eval_clips {
        preds.push(predict_clip(backbone, plan, clip, tome)?);
    }

    let pool: Vec<&LoadedClip> = eval_clips.iter().collect();
    let bench_frames = config.bench.frames;
    let mut cursor = 0usize;
    let work = || {
        for _ in 0..bench_frames {
            let clip = pool[cursor % pool.len()];
            let f = cursor % clip.clip.frames.len();
            let tokens = token_state(clip, f, tome).expect("bench tokens");
            let _ = backbone.forward(&tokens, plan).expect("bench forward");
            cursor += 1;
        }
    };
    let tp = measure_throughput(
        work,
        bench_frames,
        config.bench.repetitions,
        config.bench.warmup,
        ThreadMode::Single,
    )?;
    aggregate_metrics(label, &preds, &pool, config.accel_raw, tp.fps)
}

/// Decode one clip through the diffusion path: condition rows from the
/// (compressed) backbone, few-step latent sampling, VAE decode.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_decode_clip(
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
    vae: &MotionVae,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    clip: &LoadedClip,
    tome: &TomeSpec,
    steps: usize,
    seed: u64,
) -> HResult<Vec<PoseFrame>> {
    let cond = clip_conditions(backbone, plan, clip, tome)?;
    let latent = sample(denoiser, schedule, &cond, steps, seed)?;
    let decoded = vae.decode(&latent)?;
    Ok(decoded.frames)
}

/// Evaluate the diffusion stage: per-clip latent sampling + decode, with
/// throughput amortizing the whole clip path (backbone features for every
/// frame, one sampler pass, one decode) over its frames.
#[allow(clippy::too_many_arguments)]
pub fn eval_diffusion_stage(
    label: &str,
    config: &ExperimentConfig,
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
    vae: &MotionVae,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    eval_clips: &[LoadedClip],
    eval_seed: u64,
) -> HResult<EvalReport> {
    if eval_clips.is_empty() {
        return Err(HarnessError::Runtime("no eval clips".into()));
    }
    let tome = &config.tome;
    let steps = config.diffusion.sample_steps;
    let mut preds = Vec::new();
    for (i, clip) in eval_clips.iter().enumerate() {
        preds.push(diffusion_decode_clip(
            backbone,
            plan,
            vae,
            denoiser,
            schedule,
            clip,
            tome,
            steps,
            eval_seed.wrapping_add(i as u64),
        )?);
    }

    let pool: Vec<&LoadedClip> = eval_clips.iter().collect();
    let frames_per_clip = eval_clips[0].clip.frames.len();
    let clips_per_rep = config.bench.frames.div_ceil(frames_per_clip).max(1);
    let mut cursor = 0usize;
    let work = || {
        for _ in 0..clips_per_rep {
            let clip = pool[cursor % pool.len()];
            let _ = diffusion_decode_clip(
                backbone, plan, vae, denoiser, schedule, clip, tome, steps, eval_seed,
            )
            .expect("bench decode");
            cursor += 1;
        }
    };
    let tp = measure_throughput(
        work,
        clips_per_rep * frames_per_clip,
        config.bench.repetitions,
        config.bench.warmup,
        ThreadMode::Single,
    )?;
    aggregate_metrics(label, &preds, &pool, config.accel_raw, tp.fps)
}

/// Train the motion VAE on the training clips, tracking the holdout curve.
pub fn train_vae_stage(
    config: &ExperimentConfig,
    dataset: &Dataset,
) -> HResult<(MotionVae, Vec<EpochLoss>)> {
    let mut vae = MotionVae::new(config.vae_config())?;
    let train: Vec<_> = dataset.train.iter().map(|c| c.clip.clone()).collect();
    let holdout: Vec<_> = dataset.holdout.iter().map(|c| c.clip.clone()).collect();
    let curve = train_vae(&mut vae, &train, &holdout, &config.vae_train_opts())?;
    Ok((vae, curve))
}

/// Train the denoiser against the frozen VAE, conditioning on features from
/// the given (typically compressed) backbone.
pub fn train_denoiser_stage(
    config: &ExperimentConfig,
    dataset: &Dataset,
    vae: &MotionVae,
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
) -> HResult<(Denoiser, Vec<DenoiserEpochLoss>)> {
    let schedule = poselab_core::diffusion::build_schedule(
        config.diffusion.t_steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
        config.diffusion.zero_terminal,
    )?;
    let mut denoiser = Denoiser::new(config.denoiser_config())?;
    let clips: Vec<_> = dataset.train.iter().map(|c| c.clip.clone()).collect();
    let mut conditions = Vec::with_capacity(dataset.train.len());
    for clip in &dataset.train {
        conditions.push(clip_conditions(backbone, plan, clip, &config.tome)?);
    }
    let curve = poselab_core::diffusion::train_denoiser(
        &mut denoiser,
        vae,
        &schedule,
        &clips,
        &conditions,
        &config.denoiser_train_opts(),
    )?;
    Ok((denoiser, curve))
}

pub fn build_diffusion_schedule(config: &ExperimentConfig) -> HResult<DiffusionSchedule> {
    Ok(poselab_core::diffusion::build_schedule(
        config.diffusion.t_steps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
        config.diffusion.zero_terminal,
    )?)
}
