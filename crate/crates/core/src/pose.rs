//! Pose representation and the synthetic kinematic benchmark: an articulated
//! chain driven by band-limited random joint angles, rendered to a small
//! grayscale image whose patch statistics become the backbone's input tokens,
//! with exact person masks from the rasterizer.

use ndarray::{Array1, Array2};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::rng::substream;
use crate::token_merge::MaskGrid;

/// Per-patch statistics emitted by the renderer: mean, std, mean |∂x|, mean |∂y|.
pub const PATCH_STATS: usize = 4;
pub const DEFAULT_FPS: f64 = 30.0;

/// One pose: joint positions plus per-segment roll angles as (cos φ, sin φ).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseFrame {
    /// N_J × 3 joint positions.
    pub joints: Array2<f64>,
    /// N_φ × 2 unit rows.
    pub twists: Array2<f64>,
}

impl PoseFrame {
    pub fn n_joints(&self) -> usize {
        self.joints.nrows()
    }
    pub fn n_twists(&self) -> usize {
        self.twists.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.ncols() != 3 {
            return shape_err("PoseFrame.joints", "N_J×3", format!("{:?}", self.joints.dim()));
        }
        if self.twists.ncols() != 2 {
            return shape_err("PoseFrame.twists", "N_φ×2", format!("{:?}", self.twists.dim()));
        }
        if self.joints.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Degenerate("non-finite joint position".into()));
        }
        for (i, row) in self.twists.rows().into_iter().enumerate() {
            let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(LabError::Degenerate(format!(
                    "twist row {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Flattened [joints…, twists…] vector, the layout heads and the VAE use.
    pub fn to_vec(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.joints.len() + self.twists.len());
        out.extend(self.joints.iter());
        out.extend(self.twists.iter());
        Array1::from_vec(out)
    }

    /// Inverse of `to_vec`; twist rows are re-normalized to unit length.
    pub fn from_vec(v: &Array1<f64>, n_joints: usize, n_twists: usize) -> Result<Self> {
        let want = 3 * n_joints + 2 * n_twists;
        if v.len() != want {
            return shape_err("PoseFrame::from_vec", want, v.len());
        }
        let joints =
            Array2::from_shape_vec((n_joints, 3), v.iter().take(3 * n_joints).cloned().collect())
                .expect("sized above");
        let mut twists = Array2::from_shape_vec(
            (n_twists, 2),
            v.iter().skip(3 * n_joints).cloned().collect(),
        )
        .expect("sized above");
        normalize_twists(&mut twists);
        Ok(PoseFrame { joints, twists })
    }
}

/// Rows ~ (0,0) are snapped to (1,0); everything else is scaled to unit norm.
pub fn normalize_twists(twists: &mut Array2<f64>) {
    for mut row in twists.rows_mut() {
        let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
        if n < 1e-12 {
            row[0] = 1.0;
            row[1] = 0.0;
        } else {
            row[0] /= n;
            row[1] /= n;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionClip {
    pub frames: Vec<PoseFrame>,
    pub fps: f64,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(LabError::Empty("MotionClip.frames"));
        }
        let (nj, np) = (self.frames[0].n_joints(), self.frames[0].n_twists());
        for f in &self.frames {
            f.validate()?;
            if f.n_joints() != nj || f.n_twists() != np {
                return shape_err(
                    "MotionClip frame dims",
                    format!("({nj}, {np})"),
                    format!("({}, {})", f.n_joints(), f.n_twists()),
                );
            }
        }
        Ok(())
    }

    /// Mean distance between consecutive joints, averaged over frames.
    pub fn mean_bone_length(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for f in &self.frames {
            for k in 0..f.n_joints().saturating_sub(1) {
                let d = [
                    f.joints[[k + 1, 0]] - f.joints[[k, 0]],
                    f.joints[[k + 1, 1]] - f.joints[[k, 1]],
                    f.joints[[k + 1, 2]] - f.joints[[k, 2]],
                ];
                total += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                count += 1;
            }
        }
        total / count.max(1) as f64
    }
}

/// Generator spec for one synthetic scene: chain geometry, camera, noise, seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthScene {
    /// Chain segment lengths; the skeleton has `len()+1` joints.
    pub segment_lengths: Vec<f64>,
    /// Max |bend| per joint angle, radians.
    pub joint_limit: f64,
    /// Square output image edge, pixels.
    pub image_size: usize,
    /// Patch edge in pixels; must divide `image_size`.
    pub patch: usize,
    /// Pixels per world unit for the orthographic camera.
    pub camera_scale: f64,
    /// Std of observation noise added to patch statistics.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthScene {
    /// 8-joint chain rendered at 48² px / 6-px patches (64 tokens).
    pub fn toy(seed: u64) -> Self {
        let segment_lengths = vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let total: f64 = segment_lengths.iter().sum();
        let image_size = 48;
        SynthScene {
            segment_lengths,
            joint_limit: 0.9,
            image_size,
            patch: 6,
            camera_scale: image_size as f64 / (2.4 * total),
            noise_std: 0.01,
            seed,
        }
    }

    /// Same skeleton at 112² px / 8-px patches (196 tokens).
    pub fn toy_196(seed: u64) -> Self {
        let mut s = Self::toy(seed);
        s.image_size = 112;
        s.patch = 8;
        s.camera_scale = 112.0 / (2.4 * s.segment_lengths.iter().sum::<f64>());
        s
    }

    pub fn n_joints(&self) -> usize {
        self.segment_lengths.len() + 1
    }
    pub fn n_twists(&self) -> usize {
        self.segment_lengths.len()
    }
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_lengths.is_empty() {
            return Err(LabError::Empty("SynthScene.segment_lengths"));
        }
        if self.segment_lengths.iter().any(|&l| l <= 0.0) {
            return Err(LabError::InvalidArgument(
                "segment lengths must be positive".into(),
            ));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(LabError::InvalidArgument(format!(
                "patch {} must divide image size {}",
                self.patch, self.image_size
            )));
        }
        if self.joint_limit < 0.0 || self.camera_scale <= 0.0 || self.noise_std < 0.0 {
            return Err(LabError::InvalidArgument(
                "joint_limit/camera_scale/noise_std out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Band-limited angle trajectory: Σ aₘ · sin(2π fₘ t + φₘ), |Σ aₘ| ≤ limit.
#[derive(Clone, Debug)]
struct AngleTrack {
    amps: [f64; 3],
    freqs: [f64; 3],
    phases: [f64; 3],
}

impl AngleTrack {
    fn draw(rng: &mut ChaCha8Rng, limit: f64) -> Self {
        let mut amps = [0.0; 3];
        let mut freqs = [0.0; 3];
        let mut phases = [0.0; 3];
        let mut total = 0.0;
        for m in 0..3 {
            amps[m] = rng.gen_range(0.2..1.0);
            total += amps[m];
            freqs[m] = rng.gen_range(0.2..1.5);
            phases[m] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        if total > 0.0 {
            for a in &mut amps {
                *a *= limit / total;
            }
        }
        AngleTrack { amps, freqs, phases }
    }

    fn at(&self, t_sec: f64) -> f64 {
        (0..3)
            .map(|m| self.amps[m] * (std::f64::consts::TAU * self.freqs[m] * t_sec + self.phases[m]).sin())
            .sum()
    }
}

/// Forward kinematics: rest pose lies along +x, each segment bends the frame by
/// Ry(pitch)·Rz(yaw) before extending. Twists are roll angles around segments
/// and do not move joints.
pub fn chain_fk(segment_lengths: &[f64], pitches: &[f64], yaws: &[f64]) -> Array2<f64> {
    let n = segment_lengths.len();
    debug_assert_eq!(pitches.len(), n);
    debug_assert_eq!(yaws.len(), n);
    let mut joints = Array2::zeros((n + 1, 3));
    let mut frame = Rotation3::identity();
    let mut p = Vector3::zeros();
    for k in 0..n {
        frame = frame
            * Rotation3::from_axis_angle(&Vector3::y_axis(), pitches[k])
            * Rotation3::from_axis_angle(&Vector3::z_axis(), yaws[k]);
        p += frame * Vector3::new(segment_lengths[k], 0.0, 0.0);
        joints[[k + 1, 0]] = p.x;
        joints[[k + 1, 1]] = p.y;
        joints[[k + 1, 2]] = p.z;
    }
    joints
}

struct Rendered {
    image: Vec<f64>,
    mask: Vec<bool>,
}

const FIGURE_RADIUS: f64 = 1.6;
const FIGURE_INTENSITY: f64 = 1.0;

/// Rasterize the projected chain as thick capsules over a deterministic
/// background texture. A pixel is figure iff it lies within `FIGURE_RADIUS`
/// of some bone segment; the mask is exactly that pixel set.
fn rasterize(scene: &SynthScene, joints: &Array2<f64>, tex_phase: (f64, f64)) -> Rendered {
    let s = scene.image_size;
    let half = s as f64 / 2.0;
    let scale = scene.camera_scale;
    let mut image = vec![0.0; s * s];
    let mut mask = vec![false; s * s];

    for y in 0..s {
        for x in 0..s {
            image[y * s + x] = 0.35
                + 0.15 * (0.37 * x as f64 + tex_phase.0).sin() * (0.23 * y as f64 + tex_phase.1).cos();
        }
    }

    let proj: Vec<(f64, f64)> = joints
        .rows()
        .into_iter()
        .map(|j| (half + scale * j[0], half - scale * j[1]))
        .collect();

    for seg in 0..proj.len() - 1 {
        let (ax, ay) = proj[seg];
        let (bx, by) = proj[seg + 1];
        let x0 = ((ax.min(bx) - FIGURE_RADIUS).floor().max(0.0)) as usize;
        let x1 = ((ax.max(bx) + FIGURE_RADIUS).ceil().min((s - 1) as f64)) as usize;
        let y0 = ((ay.min(by) - FIGURE_RADIUS).floor().max(0.0)) as usize;
        let y1 = ((ay.max(by) + FIGURE_RADIUS).ceil().min((s - 1) as f64)) as usize;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let (fx, fy) = (px as f64, py as f64);
                let t = if len2 > 0.0 {
                    (((fx - ax) * dx + (fy - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (ax + t * dx, ay + t * dy);
                let d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
                if d2 <= FIGURE_RADIUS * FIGURE_RADIUS {
                    image[py * s + px] = FIGURE_INTENSITY;
                    mask[py * s + px] = true;
                }
            }
        }
    }

    Rendered { image, mask }
}

/// Patch statistics of a rendered frame: one row per token, `PATCH_STATS` wide.
fn patch_features(scene: &SynthScene, image: &[f64], noise: Option<&mut ChaCha8Rng>) -> Array2<f64> {
    let s = scene.image_size;
    let p = scene.patch;
    let g = s / p;
    let mut feats = Array2::zeros((g * g, PATCH_STATS));
    for gy in 0..g {
        for gx in 0..g {
            let token = gy * g + gx;
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            let mut gxab = 0.0;
            let mut gyab = 0.0;
            let area = (p * p) as f64;
            for iy in 0..p {
                for ix in 0..p {
                    let (x, y) = (gx * p + ix, gy * p + iy);
                    let v = image[y * s + x];
                    sum += v;
                    sum2 += v * v;
                    if x + 1 < s {
                        gxab += (image[y * s + x + 1] - v).abs();
                    }
                    if y + 1 < s {
                        gyab += (image[(y + 1) * s + x] - v).abs();
                    }
                }
            }
            let mean = sum / area;
            let var = (sum2 / area - mean * mean).max(0.0);
            feats[[token, 0]] = mean;
            feats[[token, 1]] = var.sqrt();
            feats[[token, 2]] = gxab / area;
            feats[[token, 3]] = gyab / area;
        }
    }
    if let Some(rng) = noise {
        if scene.noise_std > 0.0 {
            for v in feats.iter_mut() {
                *v += scene.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
    }
    feats
}

/// Generate a clip plus per-frame token features and exact person masks.
pub fn generate_clip(
    scene: &SynthScene,
    frames: usize,
) -> Result<(MotionClip, Vec<Array2<f64>>, Vec<MaskGrid>)> {
    scene.validate()?;
    if frames == 0 {
        return Err(LabError::InvalidArgument("frames must be ≥ 1".into()));
    }
    let n_seg = scene.segment_lengths.len();
    let mut traj_rng = substream(scene.seed, 0x7261_6a65);
    let pitches: Vec<AngleTrack> = (0..n_seg)
        .map(|_| AngleTrack::draw(&mut traj_rng, scene.joint_limit))
        .collect();
    let yaws: Vec<AngleTrack> = (0..n_seg)
        .map(|_| AngleTrack::draw(&mut traj_rng, scene.joint_limit))
        .collect();
    let rolls: Vec<AngleTrack> = (0..n_seg)
        .map(|_| AngleTrack::draw(&mut traj_rng, std::f64::consts::PI))
        .collect();
    let tex_phase = (
        traj_rng.gen_range(0.0..std::f64::consts::TAU),
        traj_rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut noise_rng = substream(scene.seed, 0x6e6f_6973);

    let mut clip_frames = Vec::with_capacity(frames);
    let mut features = Vec::with_capacity(frames);
    let mut masks = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / DEFAULT_FPS;
        let pitch: Vec<f64> = pitches.iter().map(|a| a.at(t)).collect();
        let yaw: Vec<f64> = yaws.iter().map(|a| a.at(t)).collect();
        let joints = chain_fk(&scene.segment_lengths, &pitch, &yaw);
        let mut twists = Array2::zeros((n_seg, 2));
        for k in 0..n_seg {
            let phi = rolls[k].at(t);
            twists[[k, 0]] = phi.cos();
            twists[[k, 1]] = phi.sin();
        }
        let rendered = rasterize(scene, &joints, tex_phase);
        features.push(patch_features(scene, &rendered.image, Some(&mut noise_rng)));
        masks.push(MaskGrid::new(
            rendered.mask,
            scene.image_size,
            scene.image_size,
            scene.patch,
        )?);
        clip_frames.push(PoseFrame { joints, twists });
    }
    Ok((
        MotionClip {
            frames: clip_frames,
            fps: DEFAULT_FPS,
        },
        features,
        masks,
    ))
}

/// Fractional frame positions for an endpoint-preserving resample.
fn resample_positions(src_len: usize, target: usize) -> Vec<f64> {
    if target == 1 {
        return vec![0.0];
    }
    let scale = (src_len - 1) as f64 / (target - 1) as f64;
    (0..target).map(|j| j as f64 * scale).collect()
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Evaluate the clip at arbitrary fractional frame positions. Joints are
/// interpolated linearly; twists on the circle (shortest arc), so rows stay
/// unit-norm by construction.
pub fn sample_at(clip: &MotionClip, positions: &[f64]) -> Result<MotionClip> {
    clip.validate()?;
    let last = (clip.len() - 1) as f64;
    let mut frames = Vec::with_capacity(positions.len());
    for &pos in positions {
        if !(0.0..=last + 1e-9).contains(&pos) {
            return Err(LabError::InvalidArgument(format!(
                "sample position {pos} outside clip [0, {last}]"
            )));
        }
        let pos = pos.min(last);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(clip.len() - 1);
        let w = pos - i0 as f64;
        let (a, b) = (&clip.frames[i0], &clip.frames[i1]);
        let joints = &a.joints * (1.0 - w) + &b.joints * w;
        let mut twists = Array2::zeros(a.twists.raw_dim());
        for k in 0..a.n_twists() {
            let ta = a.twists[[k, 1]].atan2(a.twists[[k, 0]]);
            let tb = b.twists[[k, 1]].atan2(b.twists[[k, 0]]);
            let ang = ta + w * wrap_angle(tb - ta);
            twists[[k, 0]] = ang.cos();
            twists[[k, 1]] = ang.sin();
        }
        frames.push(PoseFrame { joints, twists });
    }
    Ok(MotionClip {
        frames,
        fps: clip.fps,
    })
}

/// Endpoint-preserving linear resample to `target` frames.
pub fn resample_clip(clip: &MotionClip, target: usize) -> Result<MotionClip> {
    clip.validate()?;
    if clip.len() == 1 {
        // degenerate source: repeat the single frame
        return Ok(MotionClip {
            frames: vec![clip.frames[0].clone(); target.max(1)],
            fps: clip.fps,
        });
    }
    if target < 2 {
        return Err(LabError::InvalidArgument(
            "resample target must be ≥ 2 for multi-frame clips".into(),
        ));
    }
    if target == clip.len() {
        return Ok(clip.clone());
    }
    sample_at(clip, &resample_positions(clip.len(), target))
}

/// A drawn augmentation, so poses and any per-frame side data (e.g. condition
/// features) can be transformed consistently.
#[derive(Clone, Debug)]
pub struct Augmentation {
    pub reversed: bool,
    /// Source positions per output frame, if a time warp was drawn.
    pub warp: Option<Vec<f64>>,
}

impl Augmentation {
    pub fn draw(len: usize, p_reverse: f64, p_warp: f64, rng: &mut ChaCha8Rng) -> Self {
        let reversed = rng.gen::<f64>() < p_reverse;
        let warp = if rng.gen::<f64>() < p_warp && len >= 3 {
            // monotone remap with fixed endpoints: jittered increments, renormalized
            let mut increments: Vec<f64> = (0..len - 1).map(|_| rng.gen_range(0.3..1.7)).collect();
            let total: f64 = increments.iter().sum();
            let scale = (len - 1) as f64 / total;
            let mut acc = 0.0;
            let mut pos = Vec::with_capacity(len);
            pos.push(0.0);
            for inc in &mut increments {
                acc += *inc * scale;
                pos.push(acc);
            }
            let last = pos.len() - 1;
            pos[last] = (len - 1) as f64; // pin the endpoint against rounding drift
            Some(pos)
        } else {
            None
        };
        Augmentation { reversed, warp }
    }

    pub fn is_identity(&self) -> bool {
        !self.reversed && self.warp.is_none()
    }

    pub fn apply_clip(&self, clip: &MotionClip) -> Result<MotionClip> {
        let mut out = match &self.warp {
            Some(pos) => sample_at(clip, pos)?,
            None => clip.clone(),
        };
        if self.reversed {
            out.frames.reverse();
        }
        Ok(out)
    }

    /// Apply the same temporal transform to a per-frame row matrix (F × D).
    pub fn apply_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let f = rows.nrows();
        let mut out = match &self.warp {
            Some(pos) => {
                let mut warped = Array2::zeros(rows.raw_dim());
                for (j, &p) in pos.iter().enumerate() {
                    let i0 = p.floor() as usize;
                    let i1 = (i0 + 1).min(f - 1);
                    let w = p - i0 as f64;
                    let row = &rows.row(i0) * (1.0 - w) + &rows.row(i1) * w;
                    warped.row_mut(j).assign(&row);
                }
                warped
            }
            None => rows.clone(),
        };
        if self.reversed {
            let flipped: Vec<_> = (0..f).rev().collect();
            out = out.select(ndarray::Axis(0), &flipped);
        }
        out
    }
}

/// Time-reverse with prob `p_reverse`, monotone time-warp with prob `p_warp`.
pub fn augment(clip: &MotionClip, p_reverse: f64, p_warp: f64, seed: u64) -> Result<MotionClip> {
    if !(0.0..=1.0).contains(&p_reverse) || !(0.0..=1.0).contains(&p_warp) {
        return Err(LabError::InvalidArgument(
            "augmentation probabilities must lie in [0, 1]".into(),
        ));
    }
    let mut rng = substream(seed, 0x6175_676d);
    Augmentation::draw(clip.len(), p_reverse, p_warp, &mut rng).apply_clip(clip)
}
