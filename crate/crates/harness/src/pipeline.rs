//! Command implementations: each `cmd_*` maps to one CLI subcommand, and
//! `run_pipeline` chains them end to end — dataset, baseline heads,
//! layer-similarity analysis, layer merge, token-merge plan, VAE and
//! denoiser training, per-stage evaluation, and the ledger/report emission.

use std::io::Write as _;

use poselab_core::backbone::Backbone;
use poselab_core::diffusion::Denoiser;
use poselab_core::layer_merge::{cka_matrix, CkaMatrix, EclmReport};
use poselab_core::metrics::EvalReport;
use poselab_core::vae::MotionVae;

use crate::checkpoint::{load_artifact, save_artifact, Paths};
use crate::config::ExperimentConfig;
use crate::dataset::{self, Dataset};
use crate::ledger::{self, LedgerRecord};
use crate::report;
use crate::stages::{self, STAGE_BASELINE, STAGE_ECLM, STAGE_ECLM_TOME, STAGE_FULL};
use crate::{HResult, HarnessError};

pub fn cmd_gen_data(config: &ExperimentConfig, force: bool) -> HResult<()> {
    let manifest = dataset::generate(config, force)?;
    println!(
        "dataset: {} train / {} eval / {} holdout clips × {} frames",
        manifest.train.len(),
        manifest.eval.len(),
        manifest.holdout.len(),
        manifest.spec.frames
    );
    Ok(())
}

/// Build the baseline backbone (fitting its heads) and cache it on disk.
/// Reuses the cached artifact when its fingerprint matches.
pub fn ensure_backbone(config: &ExperimentConfig, dataset: &Dataset) -> HResult<Backbone> {
    let paths = Paths::new(&config.output_dir);
    let fp = config.fingerprint();
    if paths.backbone().exists() {
        if let Ok((backbone, stored_fp)) = load_artifact::<Backbone>(&paths.backbone(), "backbone")
        {
            if stored_fp == fp && backbone.validate().is_ok() {
                return Ok(backbone);
            }
        }
    }
    let backbone = stages::fit_backbone(config, dataset)?;
    save_artifact(&paths.backbone(), "backbone", &fp, &backbone)?;
    Ok(backbone)
}

pub fn cmd_analyze_cka(config: &ExperimentConfig) -> HResult<()> {
    let ds = dataset::load(config)?;
    let backbone = ensure_backbone(config, &ds)?;
    let (states, _) = stages::calibration_set(config, &ds)?;
    let traces: Vec<_> = states
        .iter()
        .map(|s| backbone.forward_with_trace(s))
        .collect::<Result<_, _>>()?;
    let cka = cka_matrix(&traces)?;
    let paths = Paths::new(&config.output_dir);
    write_cka_csv(&paths.cka_csv(), &cka)?;
    report::write_heatmap_pgm(&paths.cka_heatmap(), &cka.values)?;
    println!(
        "layer-similarity matrix ({0}×{0}) → {1}",
        cka.depth(),
        paths.cka_csv().display()
    );
    Ok(())
}

fn write_cka_csv(path: &std::path::Path, cka: &CkaMatrix) -> HResult<()> {
    let mut out = String::new();
    let d = cka.depth();
    out.push_str("layer");
    for j in 0..d {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for i in 0..d {
        out.push_str(&format!("{i}"));
        for j in 0..d {
            out.push_str(&format!(",{:.6}", cka.values[[i, j]]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn cmd_compress(config: &ExperimentConfig) -> HResult<EclmReport> {
    let ds = dataset::load(config)?;
    let backbone = ensure_backbone(config, &ds)?;
    let calib = stages::calibration_set(config, &ds)?;
    let (merged, rep) = stages::compress_backbone(config, &backbone, &calib)?;
    let paths = Paths::new(&config.output_dir);
    let fp = config.fingerprint();
    save_artifact(&paths.merged_backbone(), "merged-backbone", &fp, &merged)?;
    save_artifact(&paths.eclm_report(), "eclm-report", &fp, &rep)?;
    println!(
        "layer merge: {} → {} layers, calibration error {:.4} → {:.4} (budget {})",
        rep.layers_before, rep.layers_after, rep.base_error, rep.final_error, config.eclm.tau
    );
    Ok(rep)
}

pub fn cmd_train_vae(config: &ExperimentConfig) -> HResult<()> {
    let ds = dataset::load(config)?;
    let (vae, curve) = stages::train_vae_stage(config, &ds)?;
    let paths = Paths::new(&config.output_dir);
    let fp = config.fingerprint();
    save_artifact(&paths.vae(), "motion-vae", &fp, &vae)?;
    let mut csv = String::from("epoch,total,mse,kl,holdout_mpjpe\n");
    for e in &curve {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{}\n",
            e.epoch,
            e.total,
            e.mse,
            e.kl,
            e.holdout_mpjpe
                .map(|v| format!("{v:.9}"))
                .unwrap_or_default()
        ));
    }
    std::fs::write(paths.vae_curve(), csv)?;
    let last = curve.last().expect("non-empty curve");
    println!(
        "vae: {} epochs, final loss {:.5}, holdout {:.5}",
        curve.len(),
        last.total,
        last.holdout_mpjpe.unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Train the denoiser conditioned on the compressed backbone when one is on
/// disk, otherwise on the baseline.
pub fn cmd_train_denoiser(config: &ExperimentConfig) -> HResult<()> {
    let ds = dataset::load(config)?;
    let paths = Paths::new(&config.output_dir);
    let (vae, _) = load_artifact::<MotionVae>(&paths.vae(), "motion-vae")?;
    let backbone = if paths.merged_backbone().exists() {
        load_artifact::<Backbone>(&paths.merged_backbone(), "merged-backbone")?.0
    } else {
        ensure_backbone(config, &ds)?
    };
    let plan = config.tome.enabled.then(|| config.merge_schedule());
    let (denoiser, curve) =
        stages::train_denoiser_stage(config, &ds, &vae, &backbone, plan.as_ref())?;
    let fp = config.fingerprint();
    save_artifact(&paths.denoiser(), "denoiser", &fp, &denoiser)?;
    let mut csv = String::from("epoch,total,v_term,eps_term\n");
    for e in &curve {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.9}\n",
            e.epoch, e.total, e.v_term, e.eps_term
        ));
    }
    std::fs::write(paths.denoiser_curve(), csv)?;
    let last = curve.last().expect("non-empty curve");
    println!("denoiser: {} epochs, final loss {:.5}", curve.len(), last.total);
    Ok(())
}

/// Everything evaluated in one pass.
pub struct PipelineOutcome {
    pub reports: Vec<EvalReport>,
    pub eclm: EclmReport,
}

/// Evaluate all four stages for one seed. Artifacts (merged backbone, VAE,
/// denoiser) must already exist on disk or be supplied by the caller.
struct StageSet<'a> {
    baseline: &'a Backbone,
    merged: &'a Backbone,
    vae: &'a MotionVae,
    denoiser: &'a Denoiser,
}

fn eval_all_stages(
    config: &ExperimentConfig,
    ds: &Dataset,
    set: &StageSet<'_>,
    eval_seed: u64,
) -> HResult<Vec<EvalReport>> {
    let plan = config.tome.enabled.then(|| config.merge_schedule());
    let schedule = stages::build_diffusion_schedule(config)?;
    let mut reports = Vec::with_capacity(4);
    reports.push(stages::eval_regression_stage(
        STAGE_BASELINE,
        config,
        set.baseline,
        None,
        &ds.eval,
    )?);
    reports.push(stages::eval_regression_stage(
        STAGE_ECLM,
        config,
        set.merged,
        None,
        &ds.eval,
    )?);
    reports.push(stages::eval_regression_stage(
        STAGE_ECLM_TOME,
        config,
        set.merged,
        plan.as_ref(),
        &ds.eval,
    )?);
    reports.push(stages::eval_diffusion_stage(
        STAGE_FULL,
        config,
        set.merged,
        plan.as_ref(),
        set.vae,
        set.denoiser,
        &schedule,
        &ds.eval,
        eval_seed,
    )?);
    Ok(reports)
}

/// Render a per-stage table (throughput and error per stage, with speedup
/// ratios against the baseline row).
pub fn stage_table(reports: &[EvalReport]) -> String {
    let base_fps = reports
        .iter()
        .find(|r| r.stage == STAGE_BASELINE)
        .map(|r| r.throughput_fps)
        .unwrap_or(f64::NAN);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>10} {:>10} {:>10} {:>10} {:>12} {:>8}\n",
        "stage", "mpjpe", "pa-mpjpe", "pve", "accel", "fps", "speedup"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12.2} {:>7.2}x\n",
            r.stage,
            r.mpjpe,
            r.pa_mpjpe,
            r.pve,
            r.accel,
            r.throughput_fps,
            r.throughput_fps / base_fps
        ));
    }
    out
}

/// Full chain: dataset → baseline → similarity analysis → layer merge →
/// VAE → denoiser → evaluate the four stages per eval seed → ledger +
/// reports. A stage failure is recorded in the ledger before returning the
/// error.
pub fn run_pipeline(config: &ExperimentConfig) -> HResult<PipelineOutcome> {
    let fp = config.fingerprint();
    let paths = Paths::new(&config.output_dir);
    let fail = |stage: &str, err: &HarnessError| {
        let _ = ledger::append(
            &config.output_dir,
            &[LedgerRecord::failed(&fp, 0, stage, &err.to_string())],
        );
    };

    let ds = dataset::ensure(config)?;
    let baseline = ensure_backbone(config, &ds).map_err(|e| {
        fail("backbone", &e);
        e
    })?;
    cmd_analyze_cka(config).map_err(|e| {
        fail("cka", &e);
        e
    })?;
    let calib = stages::calibration_set(config, &ds)?;
    let (merged, eclm) =
        stages::compress_backbone(config, &baseline, &calib).map_err(|e| {
            fail(STAGE_ECLM, &e);
            e
        })?;
    save_artifact(&paths.merged_backbone(), "merged-backbone", &fp, &merged)?;
    save_artifact(&paths.eclm_report(), "eclm-report", &fp, &eclm)?;

    let plan = config.tome.enabled.then(|| config.merge_schedule());
    let (vae, vae_curve) = stages::train_vae_stage(config, &ds).map_err(|e| {
        fail("vae", &e);
        e
    })?;
    save_artifact(&paths.vae(), "motion-vae", &fp, &vae)?;
    let mut csv = String::from("epoch,total,mse,kl,holdout_mpjpe\n");
    for e in &vae_curve {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{}\n",
            e.epoch,
            e.total,
            e.mse,
            e.kl,
            e.holdout_mpjpe
                .map(|v| format!("{v:.9}"))
                .unwrap_or_default()
        ));
    }
    std::fs::write(paths.vae_curve(), csv)?;

    let (denoiser, _) = stages::train_denoiser_stage(config, &ds, &vae, &merged, plan.as_ref())
        .map_err(|e| {
            fail("denoiser", &e);
            e
        })?;
    save_artifact(&paths.denoiser(), "denoiser", &fp, &denoiser)?;

    let set = StageSet {
        baseline: &baseline,
        merged: &merged,
        vae: &vae,
        denoiser: &denoiser,
    };
    let mut all_reports = Vec::new();
    for &seed in &config.eval_seeds {
        let reports = eval_all_stages(config, &ds, &set, seed).map_err(|e| {
            fail("eval", &e);
            e
        })?;
        let records: Vec<_> = reports
            .iter()
            .map(|r| LedgerRecord::ok(&fp, seed, r.clone()))
            .collect();
        ledger::append(&config.output_dir, &records)?;
        all_reports.extend(reports);
    }

    let table = stage_table(&all_reports[..4]);
    std::fs::write(paths.stage_table(), &table)?;
    print!("{table}");
    report::cmd_report(config)?;
    Ok(PipelineOutcome {
        reports: all_reports,
        eclm,
    })
}

/// Evaluate whatever artifacts exist (at minimum the baseline) and append to
/// the ledger.
pub fn cmd_eval(config: &ExperimentConfig) -> HResult<Vec<EvalReport>> {
    let ds = dataset::load(config)?;
    let paths = Paths::new(&config.output_dir);
    let fp = config.fingerprint();
    let baseline = ensure_backbone(config, &ds)?;
    let plan = config.tome.enabled.then(|| config.merge_schedule());

    let mut reports = vec![stages::eval_regression_stage(
        STAGE_BASELINE,
        config,
        &baseline,
        None,
        &ds.eval,
    )?];
    if paths.merged_backbone().exists() {
        let (merged, _) = load_artifact::<Backbone>(&paths.merged_backbone(), "merged-backbone")?;
        reports.push(stages::eval_regression_stage(
            STAGE_ECLM,
            config,
            &merged,
            None,
            &ds.eval,
        )?);
        if let Some(p) = plan.as_ref() {
            reports.push(stages::eval_regression_stage(
                STAGE_ECLM_TOME,
                config,
                &merged,
                Some(p),
                &ds.eval,
            )?);
        }
        if paths.vae().exists() && paths.denoiser().exists() {
            let (vae, _) = load_artifact::<MotionVae>(&paths.vae(), "motion-vae")?;
            let (denoiser, _) = load_artifact::<Denoiser>(&paths.denoiser(), "denoiser")?;
            let schedule = stages::build_diffusion_schedule(config)?;
            reports.push(stages::eval_diffusion_stage(
                STAGE_FULL,
                config,
                &merged,
                plan.as_ref(),
                &vae,
                &denoiser,
                &schedule,
                &ds.eval,
                config.eval_seeds[0],
            )?);
        }
    }
    let records: Vec<_> = reports
        .iter()
        .map(|r| LedgerRecord::ok(&fp, config.eval_seeds[0], r.clone()))
        .collect();
    ledger::append(&config.output_dir, &records)?;
    let table = stage_table(&reports);
    std::fs::write(paths.stage_table(), &table)?;
    print!("{table}");
    Ok(reports)
}

/// Throughput-only benchmark of the baseline and (if present) compressed
/// stages; prints one line per stage.
pub fn cmd_bench(config: &ExperimentConfig) -> HResult<()> {
    let ds = dataset::load(config)?;
    let paths = Paths::new(&config.output_dir);
    let baseline = ensure_backbone(config, &ds)?;
    let plan = config.tome.enabled.then(|| config.merge_schedule());
    let mut lines = Vec::new();
    let base =
        stages::eval_regression_stage(STAGE_BASELINE, config, &baseline, None, &ds.eval)?;
    lines.push((STAGE_BASELINE.to_string(), base.throughput_fps));
    if paths.merged_backbone().exists() {
        let (merged, _) = load_artifact::<Backbone>(&paths.merged_backbone(), "merged-backbone")?;
        let r = stages::eval_regression_stage(STAGE_ECLM, config, &merged, None, &ds.eval)?;
        lines.push((STAGE_ECLM.to_string(), r.throughput_fps));
        if let Some(p) = plan.as_ref() {
            let r =
                stages::eval_regression_stage(STAGE_ECLM_TOME, config, &merged, Some(p), &ds.eval)?;
            lines.push((STAGE_ECLM_TOME.to_string(), r.throughput_fps));
        }
    }
    let mut out = std::io::stdout().lock();
    for (stage, fps) in &lines {
        writeln!(out, "{stage}: {fps:.2} frames/s").ok();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetSpec, SceneKind};

    /// Small end-to-end exercise of the full pipeline machinery (tiny model,
    /// tiny data, few epochs); the real trend assertions live in the
    /// acceptance suite.
    #[test]
    fn pipeline_runs_end_to_end_and_fills_the_ledger() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetSpec {
            scene: SceneKind::Toy64,
            train_clips: 3,
            eval_clips: 2,
            holdout_clips: 1,
            frames: 8,
            base_seed: 900,
        };
        cfg.model.depth = 4;
        cfg.eclm.calibration_frames = 10;
        cfg.head_fit.max_frames = 24;
        cfg.tome = crate::config::TomeSpec {
            enabled: true,
            layers: 2,
            per_layer: 8,
            floor: 40,
            mask_threshold: 0.5,
            protect_person: true,
        };
        cfg.vae.epochs = 3;
        cfg.vae.latent_tokens = 2;
        cfg.vae.latent_dim = 16;
        cfg.vae.layers = 1;
        cfg.vae.ff_dim = 32;
        cfg.diffusion.epochs = 2;
        cfg.diffusion.layers = 3;
        cfg.diffusion.ff_dim = 32;
        cfg.bench = crate::config::BenchSpec {
            repetitions: 2,
            warmup: 0,
            frames: 8,
        };
        cfg.output_dir =
            std::env::temp_dir().join(format!("poselab-pipe-{}", std::process::id()));
        std::fs::remove_dir_all(&cfg.output_dir).ok();

        let outcome = run_pipeline(&cfg).unwrap();
        let labels: Vec<&str> = outcome.reports.iter().map(|r| r.stage.as_str()).collect();
        assert_eq!(
            labels,
            vec!["baseline", "eclm", "eclm+tome", "eclm+tome+diffusion"]
        );
        assert!(outcome.eclm.final_error - outcome.eclm.base_error < cfg.eclm.tau);

        let rows = ledger::read(&cfg.output_dir).unwrap();
        assert_eq!(rows.len(), 4 * cfg.eval_seeds.len());
        assert!(rows.iter().all(|r| r.status == "ok"));

        let paths = Paths::new(&cfg.output_dir);
        for artifact in [
            paths.backbone(),
            paths.merged_backbone(),
            paths.vae(),
            paths.denoiser(),
            paths.cka_csv(),
            paths.cka_heatmap(),
            paths.stage_table(),
            paths.scatter_csv(),
            paths.scatter_svg(),
            paths.summary(),
        ] {
            assert!(artifact.exists(), "missing {}", artifact.display());
        }
        std::fs::remove_dir_all(&cfg.output_dir).ok();
    }
}
