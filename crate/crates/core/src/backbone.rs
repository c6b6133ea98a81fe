//! Toy ViT-style pose backbone: patch-statistic tokens are embedded, run
//! through L pre-norm transformer layers (each layer's parameters one flat
//! vector), pooled by a cross-attention decode head with learned queries, and
//! mapped to pose/shape by linear heads fit with ridge regression.
//!
//! Init gives late layers geometrically shrinking residual contributions, so
//! depth redundancy — later layers refining rather than rewriting the stream —
//! is present by construction and measurable via activation similarity.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::nn::ops::{linear, softmax_rows, view1, view2, Cursor};
use crate::nn::stack::{layer_infer, LayerLayout};
use crate::pose::{PoseFrame, PATCH_STATS};
use crate::rng::{normal2, substream};
use crate::token_merge::{bipartite_match, merge_pairs, plan_schedule, MergeMode, MergeSchedule, TokenState};

/// Learned query rows in the decode head.
pub const DECODE_QUERIES: usize = 4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModelConfig {
    /// Transformer depth L.
    pub depth: usize,
    /// Token width D.
    pub token_dim: usize,
    /// Attention heads H; must divide D.
    pub heads: usize,
    pub ff_dim: usize,
    /// Tokens per frame N; even, ≥ 2 (required by the A/B split).
    pub tokens_per_frame: usize,
    /// Decode feature width D_F.
    pub feature_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(LabError::InvalidArgument("depth must be ≥ 1".into()));
        }
        if self.token_dim == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(LabError::InvalidArgument(format!(
                "token_dim {} must be a positive multiple of heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.tokens_per_frame < 2 || self.tokens_per_frame % 2 != 0 {
            return Err(LabError::InvalidArgument(format!(
                "tokens_per_frame {} must be even and ≥ 2",
                self.tokens_per_frame
            )));
        }
        if self.feature_dim == 0 || self.ff_dim == 0 {
            return Err(LabError::InvalidArgument(
                "feature_dim and ff_dim must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_layout(&self) -> LayerLayout {
        LayerLayout::new(self.token_dim, self.heads, self.ff_dim)
    }

    /// Flat length of one layer's parameter vector.
    pub fn layer_param_len(&self) -> usize {
        self.layer_layout().len
    }
}

/// One transformer layer's parameters as a flat vector (layout in `nn::stack`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerParams {
    pub values: Array1<f64>,
}

impl LayerParams {
    pub fn zeros(len: usize) -> Self {
        LayerParams {
            values: Array1::zeros(len),
        }
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Flat layout of the embed block: W_in (PATCH_STATS×D), b_in (D), pos (N×D).
struct EmbedLayout {
    w_in: std::ops::Range<usize>,
    b_in: std::ops::Range<usize>,
    pos: std::ops::Range<usize>,
    len: usize,
}

impl EmbedLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut c = Cursor::new();
        let w_in = c.take(PATCH_STATS * cfg.token_dim);
        let b_in = c.take(cfg.token_dim);
        let pos = c.take(cfg.tokens_per_frame * cfg.token_dim);
        EmbedLayout {
            w_in,
            b_in,
            pos,
            len: c.len(),
        }
    }
}

/// Flat layout of the decode head: final LN, learned queries, K/V projections,
/// and the flattened-attention → feature projection.
struct DecodeLayout {
    ln_g: std::ops::Range<usize>,
    ln_b: std::ops::Range<usize>,
    queries: std::ops::Range<usize>,
    wk: std::ops::Range<usize>,
    bk: std::ops::Range<usize>,
    wv: std::ops::Range<usize>,
    bv: std::ops::Range<usize>,
    w_feat: std::ops::Range<usize>,
    b_feat: std::ops::Range<usize>,
    len: usize,
}

impl DecodeLayout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.token_dim;
        let mut c = Cursor::new();
        let ln_g = c.take(d);
        let ln_b = c.take(d);
        let queries = c.take(DECODE_QUERIES * d);
        let wk = c.take(d * d);
        let bk = c.take(d);
        let wv = c.take(d * d);
        let bv = c.take(d);
        let w_feat = c.take(DECODE_QUERIES * d * cfg.feature_dim);
        let b_feat = c.take(cfg.feature_dim);
        DecodeLayout {
            ln_g,
            ln_b,
            queries,
            wk,
            bk,
            wv,
            bv,
            w_feat,
            b_feat,
            len: c.len(),
        }
    }
}

/// Token matrices captured after each executed layer (full-token run).
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub layers: Vec<Array2<f64>>,
}

impl ActivationTrace {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub feature: Array1<f64>,
    pub pose: PoseFrame,
    pub shape: Array1<f64>,
    /// Token state at exit (merged if a plan was active).
    pub tokens_out: TokenState,
    /// Pairs actually merged per merging layer.
    pub merges_per_layer: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    pub config: ModelConfig,
    pub n_joints: usize,
    pub n_twists: usize,
    pub embed: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub decode_head: Array1<f64>,
    pub pose_head: Array1<f64>,
    pub shape_head: Array1<f64>,
}

/// Residual-scale profile for layer k of `depth`: early layers write strongly,
/// the tail tapers geometrically.
fn tail_gain(k: usize) -> f64 {
    0.8 * 0.6f64.powi(k as i32)
}

impl Backbone {
    pub fn new(config: ModelConfig, n_joints: usize, n_twists: usize) -> Result<Self> {
        config.validate()?;
        if n_joints < 2 {
            return Err(LabError::InvalidArgument("need at least 2 joints".into()));
        }
        let d = config.token_dim;
        let ll = config.layer_layout();
        let mut rng = substream(config.seed, 0x6261_636b);

        let el = EmbedLayout::new(&config);
        let mut embed = Array1::zeros(el.len);
        {
            let e = embed.as_slice_mut().unwrap();
            let w = normal2(&mut rng, PATCH_STATS, d, 1.0);
            e[el.w_in.clone()].copy_from_slice(w.as_slice().unwrap());
            let pos = normal2(&mut rng, config.tokens_per_frame, d, 0.3);
            e[el.pos.clone()].copy_from_slice(pos.as_slice().unwrap());
        }

        let base = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.depth);
        for k in 0..config.depth {
            let mut p = Array1::zeros(ll.len);
            {
                let ps = p.as_slice_mut().unwrap();
                ps[ll.ln1_g.clone()].fill(1.0);
                ps[ll.ln2_g.clone()].fill(1.0);
                let out = base * tail_gain(k);
                let out_ff = (1.0 / (config.ff_dim as f64).sqrt()) * tail_gain(k);
                for (range, rows, cols, std) in [
                    (&ll.wq, d, d, base),
                    (&ll.wk, d, d, base),
                    (&ll.wv, d, d, base),
                    (&ll.wo, d, d, out),
                    (&ll.w1, d, config.ff_dim, base),
                    (&ll.w2, config.ff_dim, d, out_ff),
                ] {
                    let w = normal2(&mut rng, rows, cols, std);
                    ps[range.clone()].copy_from_slice(w.as_slice().unwrap());
                }
            }
            layers.push(LayerParams { values: p });
        }

        let dl = DecodeLayout::new(&config);
        let mut decode_head = Array1::zeros(dl.len);
        {
            let ds = decode_head.as_slice_mut().unwrap();
            ds[dl.ln_g.clone()].fill(1.0);
            let q = normal2(&mut rng, DECODE_QUERIES, d, 1.0);
            ds[dl.queries.clone()].copy_from_slice(q.as_slice().unwrap());
            for (range, rows, cols, std) in [
                (&dl.wk, d, d, base),
                (&dl.wv, d, d, base),
                (
                    &dl.w_feat,
                    DECODE_QUERIES * d,
                    config.feature_dim,
                    1.0 / ((DECODE_QUERIES * d) as f64).sqrt(),
                ),
            ] {
                let w = normal2(&mut rng, rows, cols, std);
                ds[range.clone()].copy_from_slice(w.as_slice().unwrap());
            }
        }

        let pose_out = 3 * n_joints + 2 * n_twists;
        Ok(Backbone {
            config,
            n_joints,
            n_twists,
            embed,
            layers,
            decode_head,
            pose_head: Array1::zeros((config.feature_dim + 1) * pose_out),
            shape_head: Array1::zeros((config.feature_dim + 1) * (n_joints - 1)),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Validate loaded parameter-vector lengths against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let ll = self.config.layer_param_len();
        for (k, l) in self.layers.iter().enumerate() {
            if l.len() != ll {
                return shape_err("Backbone.layers", ll, format!("layer {k}: {}", l.len()));
            }
            if !l.is_finite() {
                return Err(LabError::NumericInstability { layer: k });
            }
        }
        let el = EmbedLayout::new(&self.config);
        if self.embed.len() != el.len {
            return shape_err("Backbone.embed", el.len, self.embed.len());
        }
        let dl = DecodeLayout::new(&self.config);
        if self.decode_head.len() != dl.len {
            return shape_err("Backbone.decode_head", dl.len, self.decode_head.len());
        }
        let pose_out = 3 * self.n_joints + 2 * self.n_twists;
        if self.pose_head.len() != (self.config.feature_dim + 1) * pose_out {
            return shape_err(
                "Backbone.pose_head",
                (self.config.feature_dim + 1) * pose_out,
                self.pose_head.len(),
            );
        }
        if self.shape_head.len() != (self.config.feature_dim + 1) * (self.n_joints - 1) {
            return shape_err(
                "Backbone.shape_head",
                (self.config.feature_dim + 1) * (self.n_joints - 1),
                self.shape_head.len(),
            );
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &TokenState) -> Result<TokenState> {
        let cfg = &self.config;
        if tokens.count() != cfg.tokens_per_frame {
            return shape_err("forward token count", cfg.tokens_per_frame, tokens.count());
        }
        if tokens.features.ncols() != PATCH_STATS {
            return shape_err("forward token width", PATCH_STATS, tokens.features.ncols());
        }
        let el = EmbedLayout::new(cfg);
        let e = self.embed.as_slice().unwrap();
        let x = linear(
            &tokens.features,
            &view2(e, &el.w_in, PATCH_STATS, cfg.token_dim),
            &view1(e, &el.b_in),
        ) + view2(e, &el.pos, cfg.tokens_per_frame, cfg.token_dim);
        Ok(TokenState {
            features: x,
            person_mask: tokens.person_mask.clone(),
            sizes: tokens.sizes.clone(),
            provenance: tokens.provenance.clone(),
        })
    }

    fn run_trunk(
        &self,
        mut state: TokenState,
        plan: Option<&MergeSchedule>,
        mut trace: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<(TokenState, Vec<usize>)> {
        let counts = match plan {
            Some(p) => plan_schedule(self.config.tokens_per_frame, p)?,
            None => Vec::new(),
        };
        let ll = self.config.layer_layout();
        let mut merged_counts = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let y = layer_infer(&ll, layer.values.as_slice().unwrap(), &state.features);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(LabError::NumericInstability { layer: k });
            }
            state.features = y;
            if let Some(t) = trace.as_deref_mut() {
                t.push(state.features.clone());
            }
            if k < counts.len() && counts[k] > 0 {
                let pairs = bipartite_match(&state, counts[k])?;
                merged_counts.push(pairs.len());
                state = merge_pairs(&state, &pairs, MergeMode::PlainMean)?;
            }
        }
        Ok((state, merged_counts))
    }

    fn decode_feature(&self, x: &Array2<f64>) -> Array1<f64> {
        let cfg = &self.config;
        let d = cfg.token_dim;
        let dl = DecodeLayout::new(cfg);
        let ds = self.decode_head.as_slice().unwrap();
        let (xn, _) = crate::nn::ops::layernorm(x, &view1(ds, &dl.ln_g), &view1(ds, &dl.ln_b));
        let keys = linear(&xn, &view2(ds, &dl.wk, d, d), &view1(ds, &dl.bk));
        let vals = linear(&xn, &view2(ds, &dl.wv, d, d), &view1(ds, &dl.bv));
        let queries = view2(ds, &dl.queries, DECODE_QUERIES, d);
        let scores = queries.dot(&keys.t()) / (d as f64).sqrt();
        let probs = softmax_rows(&scores);
        let pooled = probs.dot(&vals); // DECODE_QUERIES × D
        let flat = Array1::from_iter(pooled.iter().cloned());
        let w_feat = view2(ds, &dl.w_feat, DECODE_QUERIES * d, cfg.feature_dim);
        flat.dot(&w_feat) + view1(ds, &dl.b_feat)
    }

    fn apply_head(head: &Array1<f64>, feature: &Array1<f64>, out_dim: usize) -> Array1<f64> {
        // head layout: W (D_F × out) row-major, then bias (out)
        let d_f = feature.len();
        let hs = head.as_slice().unwrap();
        let w = view2(hs, &(0..d_f * out_dim), d_f, out_dim);
        let b = view1(hs, &(d_f * out_dim..d_f * out_dim + out_dim));
        feature.dot(&w) + b
    }

    /// Full forward returning the exit token state alongside the estimates.
    pub fn forward_full(
        &self,
        tokens: &TokenState,
        plan: Option<&MergeSchedule>,
    ) -> Result<ForwardOutput> {
        let state = self.embed_tokens(tokens)?;
        let (state, merges_per_layer) = self.run_trunk(state, plan, None)?;
        let feature = self.decode_feature(&state.features);
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NumericInstability {
                layer: self.depth(),
            });
        }
        let pose_out = 3 * self.n_joints + 2 * self.n_twists;
        let pose_raw = Self::apply_head(&self.pose_head, &feature, pose_out);
        let pose = PoseFrame::from_vec(&pose_raw, self.n_joints, self.n_twists)?;
        let shape = Self::apply_head(&self.shape_head, &feature, self.n_joints - 1);
        Ok(ForwardOutput {
            feature,
            pose,
            shape,
            tokens_out: state,
            merges_per_layer,
        })
    }

    /// Per-frame estimate: decode feature, pose, and shape (segment lengths).
    pub fn forward(
        &self,
        tokens: &TokenState,
        plan: Option<&MergeSchedule>,
    ) -> Result<(Array1<f64>, PoseFrame, Array1<f64>)> {
        let out = self.forward_full(tokens, plan)?;
        Ok((out.feature, out.pose, out.shape))
    }

    /// Full-token run capturing the token matrix after every layer.
    pub fn forward_with_trace(&self, tokens: &TokenState) -> Result<ActivationTrace> {
        let state = self.embed_tokens(tokens)?;
        let mut trace = Vec::with_capacity(self.depth());
        self.run_trunk(state, None, Some(&mut trace))?;
        Ok(ActivationTrace { layers: trace })
    }

    /// New backbone with layers[low..=high] replaced by `merged`. The original
    /// is left untouched.
    pub fn replace_layers(&self, low: usize, high: usize, merged: LayerParams) -> Result<Backbone> {
        if low >= high || high >= self.depth() {
            return Err(LabError::InvalidArgument(format!(
                "replace range [{low}, {high}] invalid for depth {}",
                self.depth()
            )));
        }
        if merged.len() != self.config.layer_param_len() {
            return shape_err(
                "replace_layers params",
                self.config.layer_param_len(),
                merged.len(),
            );
        }
        let mut out = self.clone();
        out.layers[low] = merged;
        out.layers.drain(low + 1..=high);
        Ok(out)
    }

    /// Fit the pose and shape heads by ridge regression on decode features
    /// (full-token forward). Shape targets are the per-frame segment lengths.
    pub fn fit_linear_heads(
        &mut self,
        data: &[(&TokenState, &PoseFrame)],
        ridge: f64,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(LabError::Empty("fit_linear_heads data"));
        }
        let d_f = self.config.feature_dim;
        let n = data.len();
        let pose_out = 3 * self.n_joints + 2 * self.n_twists;
        let shape_out = self.n_joints - 1;

        let mut a = nalgebra::DMatrix::<f64>::zeros(n, d_f + 1);
        let mut y_pose = nalgebra::DMatrix::<f64>::zeros(n, pose_out);
        let mut y_shape = nalgebra::DMatrix::<f64>::zeros(n, shape_out);
        for (i, (tokens, truth)) in data.iter().enumerate() {
            let out = self.forward_full(tokens, None)?;
            for j in 0..d_f {
                a[(i, j)] = out.feature[j];
            }
            a[(i, d_f)] = 1.0;
            let tv = truth.to_vec();
            for j in 0..pose_out {
                y_pose[(i, j)] = tv[j];
            }
            for k in 0..shape_out {
                let mut s = 0.0;
                for c in 0..3 {
                    let diff = truth.joints[[k + 1, c]] - truth.joints[[k, c]];
                    s += diff * diff;
                }
                y_shape[(i, k)] = s.sqrt();
            }
        }

        let mut ata = a.transpose() * &a;
        for j in 0..d_f + 1 {
            ata[(j, j)] += ridge;
        }
        let chol = nalgebra::Cholesky::new(ata).ok_or_else(|| {
            LabError::Degenerate("ridge normal equations not positive definite".into())
        })?;
        let w_pose = chol.solve(&(a.transpose() * &y_pose));
        let w_shape = chol.solve(&(a.transpose() * &y_shape));

        let pack = |w: &nalgebra::DMatrix<f64>, out_dim: usize| -> Array1<f64> {
            // rows 0..D_F are weights, row D_F is the bias
            let mut flat = Vec::with_capacity((d_f + 1) * out_dim);
            for r in 0..d_f {
                for c in 0..out_dim {
                    flat.push(w[(r, c)]);
                }
            }
            for c in 0..out_dim {
                flat.push(w[(d_f, c)]);
            }
            Array1::from_vec(flat)
        };
        self.pose_head = pack(&w_pose, pose_out);
        self.shape_head = pack(&w_shape, shape_out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{generate_clip, SynthScene};
    use crate::token_merge::tokenize_mask;

    fn toy_config(depth: usize, n: usize) -> ModelConfig {
        ModelConfig {
            depth,
            token_dim: 16,
            heads: 4,
            ff_dim: 32,
            tokens_per_frame: n,
            feature_dim: 24,
            seed: 99,
        }
    }

    fn scene_tokens(seed: u64, frames: usize) -> (Vec<TokenState>, Vec<PoseFrame>, SynthScene) {
        let scene = SynthScene::toy(seed);
        let (clip, feats, masks) = generate_clip(&scene, frames).unwrap();
        let states = feats
            .into_iter()
            .zip(masks.iter())
            .map(|(f, m)| {
                TokenState::from_features(f, tokenize_mask(m, 0.0).unwrap()).unwrap()
            })
            .collect();
        (states, clip.frames, scene)
    }

    #[test]
    fn zero_layers_leave_token_stream_unchanged() {
        let cfg = toy_config(3, 64);
        let mut model = Backbone::new(cfg, 8, 7).unwrap();
        let len = cfg.layer_param_len();
        for l in &mut model.layers {
            *l = LayerParams::zeros(len);
        }
        let (states, _, _) = scene_tokens(1, 1);
        let trace = model.forward_with_trace(&states[0]).unwrap();
        // identity trunk: every traced matrix equals the embedded input
        for w in trace.layers.windows(2) {
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = toy_config(4, 64);
        let model = Backbone::new(cfg, 8, 7).unwrap();
        let (states, _, _) = scene_tokens(2, 1);
        let (f1, p1, s1) = model.forward(&states[0], None).unwrap();
        let (f2, p2, s2) = model.forward(&states[0], None).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(p1.joints, p2.joints);
        assert_eq!(s1, s2);
    }

    #[test]
    fn merge_plan_reaches_terminal_count() {
        let cfg = toy_config(4, 64);
        let model = Backbone::new(cfg, 8, 7).unwrap();
        let (states, _, _) = scene_tokens(3, 1);
        let plan = MergeSchedule {
            layers: 3,
            per_layer: 10,
            floor: 34,
        };
        let out = model.forward_full(&states[0], Some(&plan)).unwrap();
        assert_eq!(out.tokens_out.count(), 34);
        assert_eq!(out.merges_per_layer, vec![10, 10, 10]);
        out.tokens_out.validate_partition(64).unwrap();
    }

    #[test]
    fn trace_has_depth_entries_of_full_token_shape() {
        let cfg = toy_config(4, 64);
        let model = Backbone::new(cfg, 8, 7).unwrap();
        let (states, _, _) = scene_tokens(4, 1);
        let trace = model.forward_with_trace(&states[0]).unwrap();
        assert_eq!(trace.depth(), 4);
        for m in &trace.layers {
            assert_eq!(m.dim(), (64, 16));
        }
    }

    #[test]
    fn trace_last_matches_forward_exit_state() {
        let cfg = toy_config(5, 64);
        let model = Backbone::new(cfg, 8, 7).unwrap();
        let (states, _, _) = scene_tokens(5, 1);
        let trace = model.forward_with_trace(&states[0]).unwrap();
        let out = model.forward_full(&states[0], None).unwrap();
        assert_eq!(trace.layers.last().unwrap(), &out.tokens_out.features);
    }

    #[test]
    fn duplicated_layers_trace_deterministically() {
        let cfg = toy_config(4, 64);
        let mut model = Backbone::new(cfg, 8, 7).unwrap();
        model.layers[2] = model.layers[1].clone();
        let (states, _, _) = scene_tokens(6, 1);
        let t1 = model.forward_with_trace(&states[0]).unwrap();
        let t2 = model.forward_with_trace(&states[0]).unwrap();
        assert_eq!(t1.layers[2], t2.layers[2]);
    }

    #[test]
    fn replace_layers_bookkeeping() {
        let cfg = toy_config(12, 64);
        let model = Backbone::new(cfg, 8, 7).unwrap();
        let len = cfg.layer_param_len();
        let merged = model.replace_layers(10, 11, LayerParams::zeros(len)).unwrap();
        assert_eq!(merged.depth(), 11);
        assert_eq!(model.depth(), 12, "original must stay untouched");
        let collapsed = model
            .replace_layers(0, 11, LayerParams::zeros(len))
            .unwrap();
        assert_eq!(collapsed.depth(), 1);
        assert!(model.replace_layers(5, 5, LayerParams::zeros(len)).is_err());
        assert!(model.replace_layers(5, 12, LayerParams::zeros(len)).is_err());
        // preserved ordering outside the replaced range
        assert_eq!(merged.layers[9].values, model.layers[9].values);
    }

    #[test]
    fn replacing_zero_run_with_zero_layer_keeps_outputs() {
        let cfg = toy_config(6, 64);
        let mut model = Backbone::new(cfg, 8, 7).unwrap();
        let len = cfg.layer_param_len();
        model.layers[3] = LayerParams::zeros(len);
        model.layers[4] = LayerParams::zeros(len);
        let merged = model.replace_layers(3, 4, LayerParams::zeros(len)).unwrap();
        let (states, _, _) = scene_tokens(7, 2);
        for s in &states {
            let a = model.forward(s, None).unwrap();
            let b = merged.forward(s, None).unwrap();
            let diff = (&a.0 - &b.0).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(diff <= 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_a_structured_error() {
        let cfg = toy_config(2, 64);
        let model = Backbone::new(cfg, 8, 7).unwrap();
        let bad = TokenState::from_features(Array2::zeros((32, PATCH_STATS)), vec![false; 32]).unwrap();
        assert!(matches!(
            model.forward(&bad, None),
            Err(LabError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nan_parameters_name_the_offending_layer() {
        let cfg = toy_config(3, 64);
        let mut model = Backbone::new(cfg, 8, 7).unwrap();
        model.layers[1].values[0] = f64::NAN;
        let (states, _, _) = scene_tokens(8, 1);
        match model.forward(&states[0], None) {
            Err(LabError::NumericInstability { layer }) => assert_eq!(layer, 1),
            other => panic!("expected instability error, got {other:?}"),
        }
    }

    #[test]
    fn fitted_heads_beat_zero_heads() {
        let cfg = toy_config(4, 64);
        let mut model = Backbone::new(cfg, 8, 7).unwrap();
        let (states, truths, _) = scene_tokens(9, 30);
        let data: Vec<(&TokenState, &PoseFrame)> =
            states.iter().zip(truths.iter()).collect();
        let zero_err: f64 = data
            .iter()
            .map(|(s, t)| {
                let (_, pose, _) = model.forward(s, None).unwrap();
                crate::metrics::mpjpe(&pose, t).unwrap()
            })
            .sum::<f64>()
            / data.len() as f64;
        model.fit_linear_heads(&data, 1e-3).unwrap();
        let fit_err: f64 = data
            .iter()
            .map(|(s, t)| {
                let (_, pose, _) = model.forward(s, None).unwrap();
                crate::metrics::mpjpe(&pose, t).unwrap()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(
            fit_err < 0.5 * zero_err,
            "ridge fit should help: {fit_err} vs zero-head {zero_err}"
        );
    }
}
