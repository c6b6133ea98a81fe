//! Pose-estimation metrics (joint error, Procrustes-aligned joint error,
//! skinned-vertex error, acceleration error) and the wall-clock throughput
//! harness used by calibration and final evaluation.

use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::pose::PoseFrame;

/// Mean Euclidean joint-position error between two frames.
pub fn mpjpe(pred: &PoseFrame, truth: &PoseFrame) -> Result<f64> {
    if pred.joints.dim() != truth.joints.dim() {
        return shape_err(
            "mpjpe joints",
            format!("{:?}", truth.joints.dim()),
            format!("{:?}", pred.joints.dim()),
        );
    }
    let n = pred.joints.nrows();
    let mut sum = 0.0;
    for j in 0..n {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = pred.joints[[j, c]] - truth.joints[[j, c]];
            d2 += d * d;
        }
        sum += d2.sqrt();
    }
    Ok(sum / n as f64)
}

/// Mean per-frame `mpjpe` over two equal-length clips.
pub fn mpjpe_clip(pred: &[PoseFrame], truth: &[PoseFrame]) -> Result<f64> {
    if pred.is_empty() {
        return Err(LabError::Empty("mpjpe_clip frames"));
    }
    if pred.len() != truth.len() {
        return shape_err("mpjpe_clip length", truth.len(), pred.len());
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += mpjpe(p, t)?;
    }
    Ok(sum / pred.len() as f64)
}

/// Least-squares similarity alignment (rotation, uniform scale, translation)
/// of `pred` onto `truth`; returns the aligned point set.
fn similarity_align(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Array2<f64>> {
    let n = pred.nrows();
    let nf = n as f64;
    let mut mu_x = [0.0; 3];
    let mut mu_y = [0.0; 3];
    for i in 0..n {
        for c in 0..3 {
            mu_x[c] += pred[[i, c]] / nf;
            mu_y[c] += truth[[i, c]] / nf;
        }
    }
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = nalgebra::Matrix3::<f64>::zeros();
    for i in 0..n {
        let x = [
            pred[[i, 0]] - mu_x[0],
            pred[[i, 1]] - mu_x[1],
            pred[[i, 2]] - mu_x[2],
        ];
        let y = [
            truth[[i, 0]] - mu_y[0],
            truth[[i, 1]] - mu_y[1],
            truth[[i, 2]] - mu_y[2],
        ];
        for c in 0..3 {
            var_x += x[c] * x[c] / nf;
            var_y += y[c] * y[c] / nf;
            for r in 0..3 {
                cov[(r, c)] += y[r] * x[c] / nf;
            }
        }
    }
    if var_x < 1e-18 || var_y < 1e-18 {
        return Err(LabError::Degenerate(
            "similarity alignment needs non-coincident points on both sides".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| LabError::Degenerate("SVD failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| LabError::Degenerate("SVD failed".into()))?;
    let d = svd.singular_values;
    // reflection guard: flip the smallest singular direction if needed
    let mut s = [1.0, 1.0, 1.0];
    if u.determinant() * vt.determinant() < 0.0 {
        s[2] = -1.0;
    }
    let rot = u * nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(s[0], s[1], s[2])) * vt;
    let scale = (d[0] * s[0] + d[1] * s[1] + d[2] * s[2]) / var_x;

    let mut aligned = Array2::zeros((n, 3));
    for i in 0..n {
        let xc = nalgebra::Vector3::new(
            pred[[i, 0]] - mu_x[0],
            pred[[i, 1]] - mu_x[1],
            pred[[i, 2]] - mu_x[2],
        );
        let y = scale * (rot * xc);
        for c in 0..3 {
            aligned[[i, c]] = y[c] + mu_y[c];
        }
    }
    Ok(aligned)
}

/// `mpjpe` after optimally aligning the prediction to the truth with a
/// similarity transform (rotation + uniform scale + translation).
pub fn pa_mpjpe(pred: &PoseFrame, truth: &PoseFrame) -> Result<f64> {
    if pred.joints.dim() != truth.joints.dim() {
        return shape_err(
            "pa_mpjpe joints",
            format!("{:?}", truth.joints.dim()),
            format!("{:?}", pred.joints.dim()),
        );
    }
    let aligned = similarity_align(&pred.joints, &truth.joints)?;
    let n = aligned.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = aligned[[i, c]] - truth.joints[[i, c]];
            d2 += d * d;
        }
        sum += d2.sqrt();
    }
    Ok(sum / n as f64)
}

/// Mean per-frame `pa_mpjpe` over two equal-length clips.
pub fn pa_mpjpe_clip(pred: &[PoseFrame], truth: &[PoseFrame]) -> Result<f64> {
    if pred.is_empty() {
        return Err(LabError::Empty("pa_mpjpe_clip frames"));
    }
    if pred.len() != truth.len() {
        return shape_err("pa_mpjpe_clip length", truth.len(), pred.len());
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        sum += pa_mpjpe(p, t)?;
    }
    Ok(sum / pred.len() as f64)
}

/// Toy skinning: each surface point is a fixed convex combination of joints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkinSpec {
    /// V × N_J; rows are non-negative and sum to 1.
    pub weights: Array2<f64>,
}

impl SkinSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weights.nrows() == 0 {
            return Err(LabError::Empty("SkinSpec.weights"));
        }
        for (v, row) in self.weights.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if w < -1e-12 {
                    return Err(LabError::InvalidArgument(format!(
                        "skin weight row {v} has a negative entry"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LabError::InvalidArgument(format!(
                    "skin weight row {v} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// One vertex per joint (vertex error reduces to joint error).
    pub fn identity(n_joints: usize) -> Self {
        SkinSpec {
            weights: Array2::eye(n_joints),
        }
    }

    /// Vertices at every joint plus the midpoint of each consecutive pair:
    /// 2·N_J − 1 surface points along the kinematic chain.
    pub fn chain_midpoints(n_joints: usize) -> Self {
        let v = 2 * n_joints - 1;
        let mut w = Array2::zeros((v, n_joints));
        for j in 0..n_joints {
            w[[j, j]] = 1.0;
        }
        for j in 0..n_joints - 1 {
            w[[n_joints + j, j]] = 0.5;
            w[[n_joints + j, j + 1]] = 0.5;
        }
        SkinSpec { weights: w }
    }

    fn vertices(&self, frame: &PoseFrame) -> Result<Array2<f64>> {
        if self.weights.ncols() != frame.joints.nrows() {
            return shape_err(
                "SkinSpec joints",
                self.weights.ncols(),
                frame.joints.nrows(),
            );
        }
        Ok(self.weights.dot(&frame.joints))
    }
}

/// Mean surface-point error over two equal-length clips under a toy skinning.
pub fn pve_analog(pred: &[PoseFrame], truth: &[PoseFrame], skin: &SkinSpec) -> Result<f64> {
    skin.validate()?;
    if pred.is_empty() {
        return Err(LabError::Empty("pve_analog frames"));
    }
    if pred.len() != truth.len() {
        return shape_err("pve_analog length", truth.len(), pred.len());
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let vp = skin.vertices(p)?;
        let vt = skin.vertices(t)?;
        let v = vp.nrows();
        let mut sum = 0.0;
        for i in 0..v {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = vp[[i, c]] - vt[[i, c]];
                d2 += d * d;
            }
            sum += d2.sqrt();
        }
        total += sum / v as f64;
    }
    Ok(total / pred.len() as f64)
}

fn second_differences(clip: &[PoseFrame]) -> Result<Vec<Array2<f64>>> {
    if clip.len() < 3 {
        return Err(LabError::InvalidArgument(format!(
            "acceleration needs ≥ 3 frames, got {}",
            clip.len()
        )));
    }
    let mut out = Vec::with_capacity(clip.len() - 2);
    for t in 1..clip.len() - 1 {
        let a: Array2<f64> =
            &clip[t + 1].joints - &(2.0 * &clip[t].joints) + &clip[t - 1].joints;
        out.push(a);
    }
    Ok(out)
}

/// Acceleration error: mean over interior frames and joints of the Euclidean
/// distance between predicted and true second differences of joint tracks.
/// Constant offsets and linear-in-time drift in the prediction cancel.
pub fn accel_error(pred: &[PoseFrame], truth: &[PoseFrame]) -> Result<f64> {
    if pred.len() != truth.len() {
        return shape_err("accel_error length", truth.len(), pred.len());
    }
    let ap = second_differences(pred)?;
    let at = second_differences(truth)?;
    let n_j = ap[0].nrows();
    let mut sum = 0.0;
    for (p, t) in ap.iter().zip(&at) {
        if p.dim() != t.dim() {
            return shape_err(
                "accel_error joints",
                format!("{:?}", t.dim()),
                format!("{:?}", p.dim()),
            );
        }
        for j in 0..n_j {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = p[[j, c]] - t[[j, c]];
                d2 += d * d;
            }
            sum += d2.sqrt();
        }
    }
    Ok(sum / (ap.len() * n_j) as f64)
}

/// Raw jitter: mean magnitude of second differences of one clip's joint
/// tracks (no reference), in length per frame².
pub fn accel_magnitude(clip: &[PoseFrame]) -> Result<f64> {
    let acc = second_differences(clip)?;
    let n_j = acc[0].nrows();
    let mut sum = 0.0;
    for a in &acc {
        for j in 0..n_j {
            let mut d2 = 0.0;
            for c in 0..3 {
                d2 += a[[j, c]] * a[[j, c]];
            }
            sum += d2.sqrt();
        }
    }
    Ok(sum / (acc.len() * n_j) as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median frames-per-second over repeated timed runs of `work`, after
/// `warmup` untimed runs. `frames` is the number of frames one run processes.
pub fn throughput<F: FnMut()>(
    mut work: F,
    frames: usize,
    repetitions: usize,
    warmup: usize,
) -> Result<f64> {
    if repetitions < 1 {
        return Err(LabError::InvalidArgument("repetitions must be ≥ 1".into()));
    }
    if frames == 0 {
        return Err(LabError::Empty("throughput workload"));
    }
    for _ in 0..warmup {
        work();
    }
    let mut fps = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        work();
        let dt = t0.elapsed().as_secs_f64().max(1e-12);
        fps.push(frames as f64 / dt);
    }
    Ok(median(&mut fps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreadMode {
    Single,
    Multi,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub fps: f64,
    /// Frames processed per repetition (clips × frames per clip).
    pub frames: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub mode: ThreadMode,
    pub hardware: String,
}

/// CPU model and logical-core count, best-effort from /proc/cpuinfo.
pub fn hardware_fingerprint() -> String {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".into());
    format!("{model} ({cores} logical cores)")
}

/// Run the timing harness and package the result with hardware metadata.
pub fn measure_throughput<F: FnMut()>(
    work: F,
    frames: usize,
    repetitions: usize,
    warmup: usize,
    mode: ThreadMode,
) -> Result<ThroughputReport> {
    let fps = throughput(work, frames, repetitions, warmup)?;
    Ok(ThroughputReport {
        fps,
        frames,
        repetitions,
        warmup,
        mode,
        hardware: hardware_fingerprint(),
    })
}

/// One model configuration's evaluation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub accel: f64,
    pub throughput_fps: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.pa_mpjpe > self.mpjpe + 1e-9 {
            return Err(LabError::InvalidArgument(format!(
                "pa_mpjpe {} exceeds mpjpe {}",
                self.pa_mpjpe, self.mpjpe
            )));
        }
        for (name, v) in [
            ("mpjpe", self.mpjpe),
            ("pa_mpjpe", self.pa_mpjpe),
            ("pve", self.pve),
            ("accel", self.accel),
            ("throughput_fps", self.throughput_fps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LabError::InvalidArgument(format!(
                    "{name} = {v} must be finite and ≥ 0"
                )));
            }
        }
        Ok(())
    }
}
