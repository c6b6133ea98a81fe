//! Ablation sweeps over single knobs, each emitting a CSV table shaped like
//! the corresponding study: error-budget τ, VAE latent size, training
//! objective (noise / v / both), per-layer token-merge budget n_l, and the
//! person mask on/off × diffusion on/off grid. Grid points run in parallel;
//! results are written in grid order.

use rayon::prelude::*;
use std::str::FromStr;

use poselab_core::backbone::Backbone;
use poselab_core::token_merge::{plan_schedule, MergeSchedule};
use poselab_core::vae::MotionVae;

use crate::checkpoint::Paths;
use crate::config::ExperimentConfig;
use crate::dataset::{self, Dataset};
use crate::pipeline::ensure_backbone;
use crate::stages;
use crate::{HResult, HarnessError};

pub const TAU_GRID: [f64; 5] = [1.0, 0.5, 0.3, 0.2, 0.1];
pub const LATENT_GRID: [usize; 3] = [2, 4, 8];
pub const NL_GRID: [usize; 3] = [20, 40, 60];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knob {
    Tau,
    LatentSize,
    Objective,
    Nl,
    MaskOnOff,
}

impl Knob {
    pub const ALL: [&'static str; 5] = ["tau", "latent_size", "objective", "n_l", "mask_onoff"];

    pub fn name(&self) -> &'static str {
        match self {
            Knob::Tau => "tau",
            Knob::LatentSize => "latent_size",
            Knob::Objective => "objective",
            Knob::Nl => "n_l",
            Knob::MaskOnOff => "mask_onoff",
        }
    }
}

impl FromStr for Knob {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tau" => Ok(Knob::Tau),
            "latent_size" => Ok(Knob::LatentSize),
            "objective" => Ok(Knob::Objective),
            "n_l" => Ok(Knob::Nl),
            "mask_onoff" => Ok(Knob::MaskOnOff),
            other => Err(HarnessError::Config(format!(
                "unknown knob '{other}'; valid knobs: {}",
                Knob::ALL.join(", ")
            ))),
        }
    }
}

fn sweep_tau(config: &ExperimentConfig, ds: &Dataset, base: &Backbone) -> HResult<String> {
    let calib = stages::calibration_set(config, ds)?;
    let rows: Vec<HResult<String>> = TAU_GRID
        .par_iter()
        .map(|&tau| {
            let mut cfg = config.clone();
            cfg.eclm.tau = tau;
            let (merged, rep) = stages::compress_backbone(&cfg, base, &calib)?;
            let eval = stages::eval_regression_stage("eclm", &cfg, &merged, None, &ds.eval)?;
            Ok(format!(
                "{tau},{},{},{:.6},{:.6},{:.6},{:.2}",
                rep.layers_before,
                rep.layers_after,
                rep.base_error,
                rep.final_error,
                eval.mpjpe,
                eval.throughput_fps
            ))
        })
        .collect();
    let mut out =
        String::from("tau,layers_before,layers_after,calib_base,calib_final,mpjpe,fps\n");
    for r in rows {
        out.push_str(&r?);
        out.push('\n');
    }
    Ok(out)
}

fn sweep_latent(config: &ExperimentConfig, ds: &Dataset) -> HResult<String> {
    let rows: Vec<HResult<String>> = LATENT_GRID
        .par_iter()
        .map(|&tokens| {
            let mut cfg = config.clone();
            cfg.vae.latent_tokens = tokens;
            let (vae, curve) = stages::train_vae_stage(&cfg, ds)?;
            let holdout: Vec<_> = ds.holdout.iter().map(|c| c.clip.clone()).collect();
            let recon = if holdout.is_empty() {
                f64::NAN
            } else {
                poselab_core::vae::reconstruction_error(&vae, &holdout)?
            };
            let last = curve.last().expect("non-empty curve");
            Ok(format!(
                "{tokens},{},{:.6},{:.6}",
                cfg.vae.latent_dim, last.total, recon
            ))
        })
        .collect();
    let mut out = String::from("latent_tokens,latent_dim,final_loss,holdout_recon\n");
    for r in rows {
        out.push_str(&r?);
        out.push('\n');
    }
    Ok(out)
}

/// One training-objective arm: weights for the velocity and noise terms.
pub const OBJECTIVE_GRID: [(&str, f64, f64); 3] =
    [("noise", 0.0, 1.0), ("v", 1.0, 0.0), ("both", 1.0, 1.0)];

pub struct ObjectiveRow {
    pub label: &'static str,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Error of few-step-sampled decodes on the eval clips.
    pub sampled_mpjpe: f64,
}

/// Train one denoiser per objective under identical budgets and evaluate
/// few-step sampled decode error. Reused by the acceptance suite.
pub fn objective_sweep(
    config: &ExperimentConfig,
    ds: &Dataset,
    vae: &MotionVae,
    backbone: &Backbone,
    plan: Option<&MergeSchedule>,
) -> HResult<Vec<ObjectiveRow>> {
    let schedule = stages::build_diffusion_schedule(config)?;
    OBJECTIVE_GRID
        .par_iter()
        .map(|&(label, l1, l2)| {
            let mut cfg = config.clone();
            cfg.diffusion.lambda1 = l1;
            cfg.diffusion.lambda2 = l2;
            let (denoiser, _) = stages::train_denoiser_stage(&cfg, ds, vae, backbone, plan)?;
            let eval = stages::eval_diffusion_stage(
                label,
                &cfg,
                backbone,
                plan,
                vae,
                &denoiser,
                &schedule,
                &ds.eval,
                cfg.eval_seeds[0],
            )?;
            Ok(ObjectiveRow {
                label,
                lambda1: l1,
                lambda2: l2,
                sampled_mpjpe: eval.mpjpe,
            })
        })
        .collect()
}

fn sweep_objective(config: &ExperimentConfig, ds: &Dataset, base: &Backbone) -> HResult<String> {
    let calib = stages::calibration_set(config, ds)?;
    let (merged, _) = stages::compress_backbone(config, base, &calib)?;
    let plan = config.tome.enabled.then(|| config.merge_schedule());
    let (vae, _) = stages::train_vae_stage(config, ds)?;
    let rows = objective_sweep(config, ds, &vae, &merged, plan.as_ref())?;
    let mut out = String::from("objective,lambda_v,lambda_noise,sampled_mpjpe\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.label, r.lambda1, r.lambda2, r.sampled_mpjpe
        ));
    }
    Ok(out)
}

fn sweep_nl(config: &ExperimentConfig, ds: &Dataset, base: &Backbone) -> HResult<String> {
    let calib = stages::calibration_set(config, ds)?;
    let (merged, _) = stages::compress_backbone(config, base, &calib)?;
    let n = base.config.tokens_per_frame;
    let rows: Vec<HResult<String>> = NL_GRID
        .par_iter()
        .map(|&nl| {
            let mut cfg = config.clone();
            cfg.tome.per_layer = nl;
            let plan = cfg.merge_schedule();
            let counts = plan_schedule(n, &plan)?;
            let terminal = n - counts.iter().sum::<usize>();
            let eval =
                stages::eval_regression_stage("eclm+tome", &cfg, &merged, Some(&plan), &ds.eval)?;
            Ok(format!(
                "{nl},{},{terminal},{:.6},{:.2}",
                counts
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join("|"),
                eval.mpjpe,
                eval.throughput_fps
            ))
        })
        .collect();
    let mut out = String::from("n_l,per_layer_merges,terminal_tokens,mpjpe,fps\n");
    for r in rows {
        out.push_str(&r?);
        out.push('\n');
    }
    Ok(out)
}

fn sweep_mask(config: &ExperimentConfig, ds: &Dataset, base: &Backbone) -> HResult<String> {
    let calib = stages::calibration_set(config, ds)?;
    let (merged, _) = stages::compress_backbone(config, base, &calib)?;
    let (vae, _) = stages::train_vae_stage(config, ds)?;
    let schedule = stages::build_diffusion_schedule(config)?;
    let mut out = String::from("person_mask,diffusion,mpjpe,fps\n");
    for protect in [true, false] {
        let mut cfg = config.clone();
        cfg.tome.enabled = true;
        cfg.tome.protect_person = protect;
        let plan = cfg.merge_schedule();
        let eval =
            stages::eval_regression_stage("eclm+tome", &cfg, &merged, Some(&plan), &ds.eval)?;
        out.push_str(&format!(
            "{},off,{:.6},{:.2}\n",
            if protect { "on" } else { "off" },
            eval.mpjpe,
            eval.throughput_fps
        ));
        let (denoiser, _) =
            stages::train_denoiser_stage(&cfg, ds, &vae, &merged, Some(&plan))?;
        let eval_d = stages::eval_diffusion_stage(
            "eclm+tome+diffusion",
            &cfg,
            &merged,
            Some(&plan),
            &vae,
            &denoiser,
            &schedule,
            &ds.eval,
            cfg.eval_seeds[0],
        )?;
        out.push_str(&format!(
            "{},on,{:.6},{:.2}\n",
            if protect { "on" } else { "off" },
            eval_d.mpjpe,
            eval_d.throughput_fps
        ));
    }
    Ok(out)
}

/// Run one knob sweep and write its CSV; returns the table text.
pub fn cmd_ablate(config: &ExperimentConfig, knob: Knob) -> HResult<String> {
    let ds = dataset::load(config)?;
    let base = ensure_backbone(config, &ds)?;
    let table = match knob {
        Knob::Tau => sweep_tau(config, &ds, &base)?,
        Knob::LatentSize => sweep_latent(config, &ds)?,
        Knob::Objective => sweep_objective(config, &ds, &base)?,
        Knob::Nl => sweep_nl(config, &ds, &base)?,
        Knob::MaskOnOff => sweep_mask(config, &ds, &base)?,
    };
    let path = Paths::new(&config.output_dir).ablate_csv(knob.name());
    std::fs::write(&path, &table)?;
    println!("{}", table.trim_end());
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knob_parsing_lists_valid_names_on_error() {
        assert_eq!(Knob::from_str("tau").unwrap(), Knob::Tau);
        assert_eq!(Knob::from_str("mask_onoff").unwrap(), Knob::MaskOnOff);
        let err = Knob::from_str("bogus").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        for name in Knob::ALL {
            assert!(msg.contains(name), "{msg} should list {name}");
        }
    }

    #[test]
    fn grids_match_the_reference_tables() {
        assert_eq!(TAU_GRID, [1.0, 0.5, 0.3, 0.2, 0.1]);
        let labels: Vec<&str> = OBJECTIVE_GRID.iter().map(|(l, _, _)| *l).collect();
        assert_eq!(labels, vec!["noise", "v", "both"]);
        // noise arm trains only the derived-noise term, v arm only velocity
        assert_eq!(OBJECTIVE_GRID[0].1, 0.0);
        assert_eq!(OBJECTIVE_GRID[0].2, 1.0);
        assert_eq!(OBJECTIVE_GRID[1].1, 1.0);
        assert_eq!(OBJECTIVE_GRID[1].2, 0.0);
    }
}
