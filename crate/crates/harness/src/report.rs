//! Report emission from the run ledger: throughput-vs-error scatter (CSV +
//! dependency-free SVG), layer-similarity heatmaps as plain PGM images, and
//! a human-readable summary with speedup ratios. Outputs contain no
//! timestamps, so regenerating from the same ledger is byte-identical.

use ndarray::Array2;
use std::fmt::Write as _;

use crate::checkpoint::Paths;
use crate::config::ExperimentConfig;
use crate::ledger;
use crate::stages::{STAGE_BASELINE, STAGE_LABELS};
use crate::{HResult, HarnessError};

/// Fixed per-stage colors (pipeline order), then a fallback.
const PALETTE: [&str; 5] = ["#4878cf", "#6acc65", "#d65f5f", "#956cb4", "#8c8c8c"];

fn stage_color(stage: &str) -> &'static str {
    STAGE_LABELS
        .iter()
        .position(|s| *s == stage)
        .map(|i| PALETTE[i])
        .unwrap_or(PALETTE[4])
}

/// Greyscale P2 (ASCII) PGM of a matrix in [0, 1], upscaled by an integer
/// factor so layer-count-sized matrices are viewable.
pub fn write_heatmap_pgm(path: &std::path::Path, values: &Array2<f64>) -> HResult<()> {
    const CELL: usize = 16;
    let (rows, cols) = values.dim();
    let (h, w) = (rows * CELL, cols * CELL);
    let mut out = String::new();
    writeln!(out, "P2\n{w} {h}\n255").ok();
    for py in 0..h {
        let mut line = String::new();
        for px in 0..w {
            let v = values[[py / CELL, px / CELL]].clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&g.to_string());
        }
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Point {
    stage: String,
    seed: u64,
    fps: f64,
    mpjpe: f64,
}

fn scatter_csv(points: &[Point]) -> String {
    let mut out = String::from("stage,eval_seed,throughput_fps,mpjpe\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.6},{:.9}\n",
            p.stage, p.seed, p.fps, p.mpjpe
        ));
    }
    out
}

fn scatter_svg(points: &[Point]) -> String {
    let (w, h) = (640.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 20.0, 50.0);
    let max_fps = points.iter().map(|p| p.fps).fold(1e-12, f64::max) * 1.08;
    let max_err = points.iter().map(|p| p.mpjpe).fold(1e-12, f64::max) * 1.08;
    let x = |fps: f64| ml + fps / max_fps * (w - ml - mr);
    let y = |err: f64| h - mb - err / max_err * (h - mt - mb);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr
    ));
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" \
         text-anchor=\"middle\">throughput (frames/s)</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"13\" \
         text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">joint error</text>\n",
        (mt + h - mb) / 2.0
    ));
    // tick labels at the extremes
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"end\">{max_fps:.1}</text>\n",
        w - mr,
        h - mb + 16.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{mt}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"end\">{max_err:.3}</text>\n",
        ml - 6.0
    ));
    for p in points {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"{}\" fill-opacity=\"0.85\">\
             <title>{} seed {}: {:.2} fps, {:.4}</title></circle>\n",
            x(p.fps),
            y(p.mpjpe),
            stage_color(&p.stage),
            p.stage,
            p.seed,
            p.fps,
            p.mpjpe
        ));
    }
    // legend, one row per stage that appears
    let mut seen: Vec<&str> = Vec::new();
    for p in points {
        if !seen.contains(&p.stage.as_str()) {
            seen.push(&p.stage);
        }
    }
    for (i, stage) in seen.iter().enumerate() {
        let ly = mt + 14.0 + 18.0 * i as f64;
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{ly}\" r=\"5\" fill=\"{}\"/>\n",
            w - mr - 170.0,
            stage_color(stage)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{stage}</text>\n",
            w - mr - 158.0,
            ly + 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn summary_text(points: &[Point]) -> String {
    // mean per stage, in first-appearance order
    let mut order: Vec<String> = Vec::new();
    for p in points {
        if !order.contains(&p.stage) {
            order.push(p.stage.clone());
        }
    }
    let mean = |stage: &str, f: &dyn Fn(&Point) -> f64| -> f64 {
        let vals: Vec<f64> = points.iter().filter(|p| p.stage == stage).map(f).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let base_fps = if order.iter().any(|s| s == STAGE_BASELINE) {
        mean(STAGE_BASELINE, &|p| p.fps)
    } else {
        f64::NAN
    };
    let mut out = String::from("run summary (means over ledger rows)\n\n");
    out.push_str(&format!(
        "{:<22} {:>10} {:>12} {:>9}\n",
        "stage", "mpjpe", "fps", "speedup"
    ));
    for stage in &order {
        let fps = mean(stage, &|p| p.fps);
        out.push_str(&format!(
            "{:<22} {:>10.4} {:>12.2} {:>8.2}x\n",
            stage,
            mean(stage, &|p| p.mpjpe),
            fps,
            fps / base_fps
        ));
    }
    if order.len() > 1 {
        let last = order.last().unwrap();
        out.push_str(&format!(
            "\nspeedup ratio ({last} / {STAGE_BASELINE}): {:.2}x\n",
            mean(last, &|p| p.fps) / base_fps
        ));
    }
    out
}

/// Regenerate scatter + summary from the ledger (error if it is empty).
pub fn cmd_report(config: &ExperimentConfig) -> HResult<()> {
    let rows = ledger::read(&config.output_dir)?;
    let points: Vec<Point> = rows
        .iter()
        .filter_map(|r| {
            r.report.as_ref().map(|rep| Point {
                stage: rep.stage.clone(),
                seed: r.eval_seed,
                fps: rep.throughput_fps,
                mpjpe: rep.mpjpe,
            })
        })
        .collect();
    if points.is_empty() {
        return Err(HarnessError::Runtime(
            "ledger has no successful evaluation rows to report".into(),
        ));
    }
    let paths = Paths::new(&config.output_dir);
    std::fs::write(paths.scatter_csv(), scatter_csv(&points))?;
    std::fs::write(paths.scatter_svg(), scatter_svg(&points))?;
    std::fs::write(paths.summary(), summary_text(&points))?;
    println!(
        "report: {} points → {}",
        points.len(),
        paths.scatter_svg().display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::LedgerRecord;
    use poselab_core::metrics::EvalReport;

    fn rep(stage: &str, fps: f64, err: f64) -> EvalReport {
        EvalReport {
            stage: stage.into(),
            mpjpe: err,
            pa_mpjpe: err * 0.8,
            pve: err,
            accel: 0.01,
            throughput_fps: fps,
            fingerprint: "hw".into(),
        }
    }

    #[test]
    fn report_is_deterministic_and_counts_points() {
        let mut cfg = ExperimentConfig::default();
        cfg.output_dir =
            std::env::temp_dir().join(format!("poselab-rep-{}", std::process::id()));
        std::fs::remove_dir_all(&cfg.output_dir).ok();
        let fp = cfg.fingerprint();
        ledger::append(
            &cfg.output_dir,
            &[
                LedgerRecord::ok(&fp, 0, rep("baseline", 100.0, 0.2)),
                LedgerRecord::ok(&fp, 0, rep("eclm", 130.0, 0.22)),
                LedgerRecord::failed(&fp, 0, "vae", "nope"),
            ],
        )
        .unwrap();
        cmd_report(&cfg).unwrap();
        let paths = Paths::new(&cfg.output_dir);
        let csv1 = std::fs::read(paths.scatter_csv()).unwrap();
        let svg1 = std::fs::read(paths.scatter_svg()).unwrap();
        let sum1 = std::fs::read(paths.summary()).unwrap();
        // failed rows carry no report → 2 points + header
        assert_eq!(
            String::from_utf8(csv1.clone()).unwrap().lines().count(),
            3
        );
        cmd_report(&cfg).unwrap();
        assert_eq!(std::fs::read(paths.scatter_csv()).unwrap(), csv1);
        assert_eq!(std::fs::read(paths.scatter_svg()).unwrap(), svg1);
        assert_eq!(std::fs::read(paths.summary()).unwrap(), sum1);
        let summary = String::from_utf8(sum1).unwrap();
        assert!(summary.contains("speedup ratio"), "{summary}");
        assert!(summary.contains("1.30x"), "{summary}");
        std::fs::remove_dir_all(&cfg.output_dir).ok();
    }

    #[test]
    fn empty_ledger_is_an_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.output_dir =
            std::env::temp_dir().join(format!("poselab-repempty-{}", std::process::id()));
        std::fs::remove_dir_all(&cfg.output_dir).ok();
        assert!(cmd_report(&cfg).is_err());
        // a ledger with only failures is also "nothing to report"
        ledger::append(
            &cfg.output_dir,
            &[LedgerRecord::failed("fp", 0, "eval", "x")],
        )
        .unwrap();
        let err = cmd_report(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::remove_dir_all(&cfg.output_dir).ok();
    }

    #[test]
    fn heatmap_pgm_has_expected_header_and_values() {
        let dir = std::env::temp_dir().join(format!("poselab-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pgm");
        let m = ndarray::array![[0.0, 1.0], [0.5, 0.25]];
        write_heatmap_pgm(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("32 32"));
        assert_eq!(lines.next(), Some("255"));
        let first_row: Vec<&str> = lines.next().unwrap().split(' ').collect();
        assert_eq!(first_row.len(), 32);
        assert_eq!(first_row[0], "0");
        assert_eq!(first_row[31], "255");
        std::fs::remove_dir_all(&dir).ok();
    }
}
