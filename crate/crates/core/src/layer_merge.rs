//! Layer-similarity analysis (linear CKA) and error-constrained layer
//! merging: a calibration-driven window search that collapses runs of
//! consecutive layers into a single layer via the sum-then-subtract rule,
//! committing a window only while the calibration error stays within budget.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{ActivationTrace, Backbone, LayerParams};
use crate::error::{shape_err, LabError, Result};
use crate::metrics::mpjpe;
use crate::pose::PoseFrame;
use crate::token_merge::TokenState;

/// Pairwise layer-similarity matrix; entries in [0, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub values: Array2<f64>,
}

impl CkaMatrix {
    pub fn depth(&self) -> usize {
        self.values.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.values.dim();
        if r != c {
            return shape_err("CkaMatrix", format!("{r}×{r}"), format!("{r}×{c}"));
        }
        for i in 0..r {
            if (self.values[[i, i]] - 1.0).abs() > 1e-9 {
                return Err(LabError::InvalidArgument(format!(
                    "CKA diagonal [{i},{i}] = {} ≠ 1",
                    self.values[[i, i]]
                )));
            }
            for j in 0..r {
                let v = self.values[[i, j]];
                if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(LabError::InvalidArgument(format!(
                        "CKA [{i},{j}] = {v} outside [0, 1]"
                    )));
                }
                if (v - self.values[[j, i]]).abs() > 1e-9 {
                    return Err(LabError::InvalidArgument(format!(
                        "CKA not symmetric at [{i},{j}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    x - &mean
}

/// Linear CKA between two activation matrices with matching row counts:
/// ‖XᵀY‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F) after centering each column.
pub fn linear_cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return shape_err("linear_cka rows", x.nrows(), y.nrows());
    }
    if x.nrows() < 2 {
        return Err(LabError::InvalidArgument(
            "linear_cka needs ≥ 2 rows".into(),
        ));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let frob = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sxx = frob(&xc.t().dot(&xc));
    let syy = frob(&yc.t().dot(&yc));
    if sxx < 1e-12 || syy < 1e-12 {
        return Err(LabError::Degenerate(
            "linear_cka: zero-variance activations (all rows equal)".into(),
        ));
    }
    let sxy = xc.t().dot(&yc);
    let num: f64 = sxy.iter().map(|v| v * v).sum();
    Ok(num / (sxx * syy))
}

/// Pairwise linear CKA between layers, pooling token rows across a batch of
/// traces from the calibration set.
pub fn cka_matrix(traces: &[ActivationTrace]) -> Result<CkaMatrix> {
    if traces.is_empty() {
        return Err(LabError::Empty("cka_matrix traces"));
    }
    let depth = traces[0].depth();
    for (i, t) in traces.iter().enumerate() {
        if t.depth() != depth {
            return shape_err("cka_matrix trace depth", depth, format!("trace {i}: {}", t.depth()));
        }
    }
    let pooled: Vec<Array2<f64>> = (0..depth)
        .map(|l| {
            let views: Vec<_> = traces.iter().map(|t| t.layers[l].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("matching widths")
        })
        .collect();
    let mut values = Array2::zeros((depth, depth));
    for i in 0..depth {
        for j in i..depth {
            let v = linear_cka(&pooled[i], &pooled[j])?;
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    let m = CkaMatrix { values };
    m.validate()?;
    Ok(m)
}

/// Collapse consecutive layer parameter vectors into one:
/// θ_first + Σ_k (θ_k − θ_first) over the later layers, i.e.
/// Σ θ_k − (m−1)·θ_first.
pub fn merge_layer_params(params: &[LayerParams]) -> Result<LayerParams> {
    if params.len() < 2 {
        return Err(LabError::InvalidArgument(format!(
            "merge needs ≥ 2 layers, got {}",
            params.len()
        )));
    }
    let len = params[0].len();
    for (k, p) in params.iter().enumerate() {
        if p.len() != len {
            return shape_err("merge_layer_params", len, format!("layer {k}: {}", p.len()));
        }
    }
    let mut out: Array1<f64> = params[0].values.clone();
    for p in &params[1..] {
        out = out + &p.values - &params[0].values;
    }
    Ok(LayerParams { values: out })
}

/// Merge the inclusive layer range [low, high] of `model` into one layer.
pub fn merge_range(model: &Backbone, low: usize, high: usize) -> Result<Backbone> {
    if low >= high || high >= model.depth() {
        return Err(LabError::InvalidArgument(format!(
            "merge range [{low}, {high}] invalid for depth {}",
            model.depth()
        )));
    }
    let merged = merge_layer_params(&model.layers[low..=high])?;
    model.replace_layers(low, high, merged)
}

/// Mean joint error of full-token predictions over a calibration set.
pub fn extract_error(
    model: &Backbone,
    frames: &[TokenState],
    truth: &[PoseFrame],
) -> Result<f64> {
    if frames.is_empty() {
        return Err(LabError::Empty("extract_error calibration set"));
    }
    if frames.len() != truth.len() {
        return shape_err("extract_error truth length", frames.len(), truth.len());
    }
    let errs: Result<Vec<f64>> = (0..frames.len())
        .into_par_iter()
        .map(|i| {
            let (_, pose, _) = model.forward(&frames[i], None)?;
            mpjpe(&pose, &truth[i])
        })
        .collect();
    let errs = errs?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EclmConfig {
    /// Error budget τ: a merge candidate is accepted while
    /// error − base_error < τ on the calibration set.
    pub tau: f64,
    /// Calibration frames the caller is expected to supply (n_f).
    pub calibration_frames: usize,
}

impl EclmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LabError::InvalidArgument(format!(
                "tau {} must be > 0",
                self.tau
            )));
        }
        if self.calibration_frames < 1 {
            return Err(LabError::InvalidArgument(
                "calibration_frames must be ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EclmReport {
    /// Inclusive merged windows in the original model's layer indexing.
    pub merged_ranges: Vec<[usize; 2]>,
    pub base_error: f64,
    pub final_error: f64,
    pub layers_before: usize,
    pub layers_after: usize,
}

impl EclmReport {
    pub fn validate(&self) -> Result<()> {
        let removed: usize = self.merged_ranges.iter().map(|r| r[1] - r[0]).sum();
        if self.layers_after + removed != self.layers_before {
            return Err(LabError::InvalidArgument(format!(
                "layer accounting: {} after + {} removed ≠ {} before",
                self.layers_after, removed, self.layers_before
            )));
        }
        for r in &self.merged_ranges {
            if r[0] >= r[1] {
                return Err(LabError::InvalidArgument(format!(
                    "merged range [{}, {}] must span ≥ 2 layers",
                    r[0], r[1]
                )));
            }
        }
        Ok(())
    }
}

/// Error-constrained layer merging: slide a window (low, high) down from the
/// top of the stack, widening it while the merged candidate keeps the
/// calibration error within τ of the original model's error, committing the
/// last accepted window on failure, then continuing below it.
///
/// Every candidate is compared against the *original* model's error — the
/// baseline is never recomputed after a commit — and a window that is still
/// accepted when the scan walks off the bottom of the stack is not committed.
/// Both behaviours are deliberate (see tests).
pub fn eclm_search(
    model: &Backbone,
    config: &EclmConfig,
    frames: &[TokenState],
    truth: &[PoseFrame],
) -> Result<(Backbone, EclmReport)> {
    config.validate()?;
    if model.depth() < 2 {
        return Err(LabError::InvalidArgument(
            "eclm_search needs depth ≥ 2".into(),
        ));
    }
    let base_error = extract_error(model, frames, truth)?;
    let mut current = model.clone();
    // current layer index → inclusive span of original layer indices
    let mut spans: Vec<(usize, usize)> = (0..model.depth()).map(|i| (i, i)).collect();
    let mut merged_ranges: Vec<[usize; 2]> = Vec::new();

    let mut high = current.depth() - 1;
    let mut low = high as isize - 1;
    while low >= 0 {
        let l = low as usize;
        let candidate = merge_range(&current, l, high)?;
        let err = extract_error(&candidate, frames, truth)?;
        if err - base_error < config.tau {
            low -= 1;
        } else if l + 1 != high {
            current = merge_range(&current, l + 1, high)?;
            let span = (spans[l + 1].0, spans[high].1);
            spans.splice(l + 1..=high, [span]);
            merged_ranges.push([span.0, span.1]);
            high = l;
            low = high as isize - 1;
        } else {
            high -= 1;
            low -= 1;
        }
    }

    merged_ranges.reverse(); // report bottom-up
    let final_error = extract_error(&current, frames, truth)?;
    let report = EclmReport {
        merged_ranges,
        base_error,
        final_error,
        layers_before: model.depth(),
        layers_after: current.depth(),
    };
    report.validate()?;
    Ok((current, report))
}

/// Uniform-stride frame sampling for calibration: per clip of length m, take
/// k = min(per_clip, m) frames at indices ⌊i·m/k⌋. Returns (clip, frame)
/// index pairs. Stride sampling is already deterministic; `seed` is accepted
/// for interface stability and currently unused.
pub fn sample_calibration(
    clip_lens: &[usize],
    per_clip: usize,
    _seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if per_clip < 1 {
        return Err(LabError::InvalidArgument("per_clip must be ≥ 1".into()));
    }
    let mut out = Vec::new();
    for (c, &m) in clip_lens.iter().enumerate() {
        if m == 0 {
            return Err(LabError::Empty("sample_calibration clip"));
        }
        let k = per_clip.min(m);
        for i in 0..k {
            out.push((c, i * m / k));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::pose::{generate_clip, SynthScene};
    use crate::rng::{normal2, seeded};
    use crate::token_merge::tokenize_mask;
    use approx::assert_abs_diff_eq;

    /// Gram-matrix CKA oracle straight from the definition:
    /// tr(KxKy) / √(tr(KxKx)·tr(KyKy)) with K = (centered X)(centered X)ᵀ.
    fn cka_gram_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let gram = |m: &Array2<f64>| {
            let c = center_columns(m);
            c.dot(&c.t())
        };
        let kx = gram(x);
        let ky = gram(y);
        let tr = |a: &Array2<f64>, b: &Array2<f64>| a.dot(b).diag().sum();
        tr(&kx, &ky) / (tr(&kx, &kx) * tr(&ky, &ky)).sqrt()
    }

    fn toy_model(depth: usize) -> Backbone {
        let cfg = ModelConfig {
            depth,
            token_dim: 16,
            heads: 4,
            ff_dim: 32,
            tokens_per_frame: 64,
            feature_dim: 24,
            seed: 5,
        };
        Backbone::new(cfg, 8, 7).unwrap()
    }

    fn calib(seed: u64, frames: usize) -> (Vec<TokenState>, Vec<PoseFrame>) {
        let scene = SynthScene::toy(seed);
        let (clip, feats, masks) = generate_clip(&scene, frames).unwrap();
        let states: Vec<TokenState> = feats
            .into_iter()
            .zip(masks.iter())
            .map(|(f, m)| TokenState::from_features(f, tokenize_mask(m, 0.0).unwrap()).unwrap())
            .collect();
        (states, clip.frames)
    }

    /// Strong-tail model with fitted heads, so merging late layers really
    /// moves the calibration error.
    fn fitted_strong_model(depth: usize) -> (Backbone, Vec<TokenState>, Vec<PoseFrame>) {
        let mut model = toy_model(depth);
        model.layers.reverse(); // init tapers the tail; reversed = strong tail
        let (states, truths) = calib(21, 24);
        let data: Vec<(&TokenState, &PoseFrame)> = states.iter().zip(truths.iter()).collect();
        model.fit_linear_heads(&data, 1e-3).unwrap();
        (model, states, truths)
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let mut rng = seeded(31);
        let x = normal2(&mut rng, 20, 6, 1.0);
        assert_abs_diff_eq!(linear_cka(&x, &x).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cka_invariant_to_orthogonal_maps_and_scaling() {
        let mut rng = seeded(32);
        let x = normal2(&mut rng, 20, 6, 1.0);
        let g = normal2(&mut rng, 6, 6, 1.0);
        let q = nalgebra::DMatrix::from_fn(6, 6, |i, j| g[[i, j]]).qr().q();
        let xq = Array2::from_shape_fn((20, 6), |(i, j)| {
            (0..6).map(|k| x[[i, k]] * q[(k, j)]).sum()
        });
        assert_abs_diff_eq!(linear_cka(&x, &xq).unwrap(), 1.0, epsilon = 1e-9);
        let scaled = x.mapv(|v| 3.7 * v);
        assert_abs_diff_eq!(linear_cka(&x, &scaled).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cka_matches_gram_definition_oracle() {
        // hand case from the feature-space formula…
        let x = ndarray::array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let y = ndarray::array![[2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
        assert_abs_diff_eq!(
            linear_cka(&x, &y).unwrap(),
            cka_gram_oracle(&x, &y),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(linear_cka(&x, &y).unwrap(), 1.0, epsilon = 1e-12);
        // …and random rectangular pairs with different widths
        let mut rng = seeded(33);
        for _ in 0..20 {
            let a = normal2(&mut rng, 12, 5, 1.0);
            let b = normal2(&mut rng, 12, 7, 1.0);
            assert_abs_diff_eq!(
                linear_cka(&a, &b).unwrap(),
                cka_gram_oracle(&a, &b),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn cka_rejects_zero_variance() {
        let x = Array2::from_elem((5, 3), 2.0);
        let y = normal2(&mut seeded(34), 5, 3, 1.0);
        assert!(matches!(linear_cka(&x, &y), Err(LabError::Degenerate(_))));
    }

    #[test]
    fn cka_matrix_is_symmetric_unit_diagonal() {
        let model = toy_model(5);
        let (states, _) = calib(35, 4);
        let traces: Vec<ActivationTrace> = states
            .iter()
            .map(|s| model.forward_with_trace(s).unwrap())
            .collect();
        let m = cka_matrix(&traces).unwrap();
        m.validate().unwrap();
        assert_eq!(m.depth(), 5);
    }

    #[test]
    fn cka_adjacent_similarity_rises_toward_redundant_tail() {
        let model = toy_model(8);
        let (states, _) = calib(36, 6);
        let traces: Vec<ActivationTrace> = states
            .iter()
            .map(|s| model.forward_with_trace(s).unwrap())
            .collect();
        let m = cka_matrix(&traces).unwrap();
        let first = m.values[[0, 1]];
        let last = m.values[[6, 7]];
        assert!(
            last > first,
            "tapered tail should look more self-similar: {first} vs {last}"
        );
        assert!(last > 0.99, "near-identity tail pair: {last}");
    }

    #[test]
    fn merge_hand_cases() {
        let theta = |v: &[f64]| LayerParams {
            values: Array1::from_vec(v.to_vec()),
        };
        // repeated layer collapses to itself
        let t = theta(&[0.3, -1.2]);
        let m = merge_layer_params(&[t.clone(), t.clone(), t.clone()]).unwrap();
        assert_eq!(m.values, t.values);
        // two layers collapse to the second
        let a = theta(&[1.0, 2.0]);
        let b = theta(&[-3.0, 5.0]);
        assert_eq!(merge_layer_params(&[a.clone(), b.clone()]).unwrap().values, b.values);
        // (1,0) + (2,2) + (0,4) → (1,0) + (1,2) + (−1,4) = (1,6)
        let m = merge_layer_params(&[theta(&[1.0, 0.0]), theta(&[2.0, 2.0]), theta(&[0.0, 4.0])])
            .unwrap();
        assert_eq!(m.values, Array1::from_vec(vec![1.0, 6.0]));
        // prepending extra copies of the first layer changes nothing
        let m2 = merge_layer_params(&[
            theta(&[1.0, 0.0]),
            theta(&[1.0, 0.0]),
            theta(&[2.0, 2.0]),
            theta(&[0.0, 4.0]),
        ])
        .unwrap();
        assert_eq!(m2.values, m.values);
    }

    #[test]
    fn merge_rejects_bad_inputs() {
        let a = LayerParams {
            values: Array1::zeros(3),
        };
        let b = LayerParams {
            values: Array1::zeros(4),
        };
        assert!(merge_layer_params(&[a.clone()]).is_err());
        assert!(merge_layer_params(&[a, b]).is_err());
    }

    #[test]
    fn extract_error_matches_hand_recomputation() {
        let (model, states, truths) = fitted_strong_model(4);
        let fast = extract_error(&model, &states, &truths).unwrap();
        let mut sum = 0.0;
        for (s, t) in states.iter().zip(&truths) {
            let (_, pose, _) = model.forward(s, None).unwrap();
            sum += mpjpe(&pose, t).unwrap();
        }
        assert_abs_diff_eq!(fast, sum / states.len() as f64, epsilon = 1e-12);
        assert!(fast > 0.0);
    }

    #[test]
    fn extract_error_zero_and_offset_cases() {
        let (model, states, _) = fitted_strong_model(3);
        // truth taken from the model's own predictions → error 0
        let self_truth: Vec<PoseFrame> = states
            .iter()
            .map(|s| model.forward(s, None).unwrap().1)
            .collect();
        assert_abs_diff_eq!(
            extract_error(&model, &states, &self_truth).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        // translate every true joint by t → error ‖t‖
        let t = [0.3f64, -0.4, 1.2];
        let norm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        let shifted: Vec<PoseFrame> = self_truth
            .iter()
            .map(|f| PoseFrame {
                joints: Array2::from_shape_fn(f.joints.dim(), |(j, c)| f.joints[[j, c]] + t[c]),
                twists: f.twists.clone(),
            })
            .collect();
        assert_abs_diff_eq!(
            extract_error(&model, &states, &shifted).unwrap(),
            norm,
            epsilon = 1e-9
        );
        assert!(extract_error(&model, &[], &[]).is_err());
    }

    #[test]
    fn eclm_rejection_path_returns_input_unchanged() {
        let (model, states, truths) = fitted_strong_model(4);
        let cfg = EclmConfig {
            tau: 1e-9,
            calibration_frames: states.len(),
        };
        let (merged, report) = eclm_search(&model, &cfg, &states, &truths).unwrap();
        assert!(report.merged_ranges.is_empty());
        assert_eq!(merged.depth(), model.depth());
        assert_eq!(report.layers_before, report.layers_after);
        for (a, b) in merged.layers.iter().zip(&model.layers) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn eclm_merges_identity_tail_run() {
        let (mut model, states, truths) = fitted_strong_model(6);
        let len = model.config.layer_param_len();
        for k in 3..6 {
            model.layers[k] = LayerParams::zeros(len);
        }
        let data: Vec<(&TokenState, &PoseFrame)> = states.iter().zip(truths.iter()).collect();
        model.fit_linear_heads(&data, 1e-3).unwrap();
        let cfg = EclmConfig {
            tau: 1e-6,
            calibration_frames: states.len(),
        };
        let (merged, report) = eclm_search(&model, &cfg, &states, &truths).unwrap();
        assert_eq!(report.merged_ranges, vec![[3, 5]]);
        assert_eq!(merged.depth(), 4);
        assert!(report.final_error - report.base_error < cfg.tau);
        // merging an identity run is exact: outputs match the original
        for (s, _) in data {
            let (fa, _, _) = model.forward(s, None).unwrap();
            let (fb, _, _) = merged.forward(s, None).unwrap();
            let diff = (&fa - &fb).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(diff < 1e-9);
        }
    }

    #[test]
    fn eclm_single_harmless_pair_fixture() {
        // depth 6, one identity layer at index 2: merging [2,3] just drops
        // the identity, every other window really changes the function
        let (mut model, states, truths) = fitted_strong_model(6);
        let len = model.config.layer_param_len();
        model.layers[2] = LayerParams::zeros(len);
        let data: Vec<(&TokenState, &PoseFrame)> = states.iter().zip(truths.iter()).collect();
        model.fit_linear_heads(&data, 1e-3).unwrap();
        let cfg = EclmConfig {
            tau: 1e-6,
            calibration_frames: states.len(),
        };
        let (merged, report) = eclm_search(&model, &cfg, &states, &truths).unwrap();
        assert_eq!(report.merged_ranges, vec![[2, 3]]);
        assert_eq!(report.layers_after, 5);
        assert_eq!(merged.depth(), 5);
        report.validate().unwrap();
    }

    #[test]
    fn eclm_on_tapered_model_merges_and_respects_budget() {
        let mut model = toy_model(8);
        // several scenes and a firm ridge keep the fitted heads
        // well-conditioned, so merge deltas reflect the trunk rather than
        // amplified head noise
        let mut states = Vec::new();
        let mut truths = Vec::new();
        for seed in [40u64, 41, 42] {
            let (s, t) = calib(seed, 40);
            states.extend(s);
            truths.extend(t);
        }
        let data: Vec<(&TokenState, &PoseFrame)> = states.iter().zip(truths.iter()).collect();
        model.fit_linear_heads(&data, 1.0).unwrap();
        let cfg = EclmConfig {
            tau: 0.1,
            calibration_frames: states.len(),
        };
        let (merged, report) = eclm_search(&model, &cfg, &states, &truths).unwrap();
        report.validate().unwrap();
        assert!(report.layers_after <= report.layers_before);
        assert!(
            report.final_error - report.base_error < cfg.tau,
            "budget respected: {} vs base {}",
            report.final_error,
            report.base_error
        );
        assert!(
            merged.depth() < model.depth(),
            "tapered tail should be mergeable at τ = 0.1"
        );
    }

    #[test]
    fn calibration_sampling_strides() {
        // 160-frame clip at 80 per clip → every 2nd frame
        let s = sample_calibration(&[160], 80, 0).unwrap();
        assert_eq!(s.len(), 80);
        assert!(s.iter().enumerate().all(|(i, &(c, f))| c == 0 && f == 2 * i));
        // same length as requested → identity
        let s = sample_calibration(&[80], 80, 0).unwrap();
        assert!(s.iter().enumerate().all(|(i, &(_, f))| f == i));
        // short clip → all frames
        let s = sample_calibration(&[5], 80, 0).unwrap();
        assert_eq!(s.len(), 5);
        // 17 clips of 80 → 1360 calibration frames
        let s = sample_calibration(&vec![80; 17], 80, 0).unwrap();
        assert_eq!(s.len(), 1360);
        assert!(sample_calibration(&[10], 0, 0).is_err());
        assert!(sample_calibration(&[0], 10, 0).is_err());
    }
}
