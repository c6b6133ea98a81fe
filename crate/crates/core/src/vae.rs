//! Transformer VAE over pose sequences: F pose frames are encoded into
//! N_Z × D_Z latent tokens via learned query tokens, and decoded back into
//! frames via learned frame queries. Trained with MSE + weighted KL using the
//! shared flat-parameter transformer blocks and hand-rolled backward passes.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{shape_err, LabError, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::ops::{
    accum1, accum2, layernorm, layernorm_bwd, linear, linear_bwd, view1, view2, Cursor, LnCache,
};
use crate::nn::stack::{alloc_stack, stack_bwd, stack_fwd, StackCache, StackConfig};
use crate::pose::{MotionClip, PoseFrame, DEFAULT_FPS};
use crate::rng::{normal2, substream};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct VaeConfig {
    /// Clip length F the VAE operates on.
    pub frames: usize,
    /// Latent tokens N_Z.
    pub latent_tokens: usize,
    /// Latent width D_Z; also the transformer width.
    pub latent_dim: usize,
    /// Transformer depth, per side (encoder and decoder each get this many).
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub kl_weight: f64,
    pub n_joints: usize,
    pub n_twists: usize,
    pub seed: u64,
}

impl VaeConfig {
    /// Per-frame pose vector width: 3 per joint + 2 per twist.
    pub fn pose_dim(&self) -> usize {
        3 * self.n_joints + 2 * self.n_twists
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_tokens > self.frames {
            return Err(LabError::InvalidArgument(format!(
                "latent_tokens {} must be ≤ frames {}",
                self.latent_tokens, self.frames
            )));
        }
        if self.frames == 0
            || self.latent_tokens == 0
            || self.latent_dim == 0
            || self.layers == 0
            || self.ff_dim == 0
            || self.n_joints < 2
        {
            return Err(LabError::InvalidArgument(
                "all VAE dimensions must be ≥ 1 (≥ 2 joints)".into(),
            ));
        }
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(LabError::InvalidArgument(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.kl_weight < 0.0 {
            return Err(LabError::InvalidArgument(
                "dropout must be in [0,1), kl_weight ≥ 0".into(),
            ));
        }
        Ok(())
    }

    fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            dim: self.latent_dim,
            heads: self.heads,
            ff: self.ff_dim,
            dropout: self.dropout,
            long_skip: false,
        }
    }
}

/// Latent token matrix, N_Z × D_Z.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatentSeq {
    pub z: Array2<f64>,
}

/// Diagonal-Gaussian posterior over the latent tokens.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mean: Array2<f64>,
    pub logvar: Array2<f64>,
}

impl PosteriorParams {
    pub fn validate(&self) -> Result<()> {
        if self.mean.dim() != self.logvar.dim() {
            return shape_err(
                "PosteriorParams",
                format!("{:?}", self.mean.dim()),
                format!("{:?}", self.logvar.dim()),
            );
        }
        if self.mean.iter().chain(self.logvar.iter()).any(|v| !v.is_finite()) {
            return Err(LabError::Degenerate("posterior has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Offsets of every block inside the flat parameter vector.
struct VaeLayout {
    embed_w: Range<usize>,
    embed_b: Range<usize>,
    enc_queries: Range<usize>,
    enc_pos: Range<usize>,
    enc_stack: Range<usize>,
    enc_ln_g: Range<usize>,
    enc_ln_b: Range<usize>,
    mean_w: Range<usize>,
    mean_b: Range<usize>,
    logvar_w: Range<usize>,
    logvar_b: Range<usize>,
    dec_embed_w: Range<usize>,
    dec_embed_b: Range<usize>,
    dec_queries: Range<usize>,
    dec_pos: Range<usize>,
    dec_stack: Range<usize>,
    dec_ln_g: Range<usize>,
    dec_ln_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    len: usize,
}

impl VaeLayout {
    fn new(cfg: &VaeConfig) -> Self {
        let d = cfg.latent_dim;
        let p = cfg.pose_dim();
        let stack_len = cfg.stack().param_len();
        let mut c = Cursor::new();
        let embed_w = c.take(p * d);
        let embed_b = c.take(d);
        let enc_queries = c.take(cfg.latent_tokens * d);
        let enc_pos = c.take((cfg.frames + cfg.latent_tokens) * d);
        let enc_stack = c.take(stack_len);
        let enc_ln_g = c.take(d);
        let enc_ln_b = c.take(d);
        let mean_w = c.take(d * d);
        let mean_b = c.take(d);
        let logvar_w = c.take(d * d);
        let logvar_b = c.take(d);
        let dec_embed_w = c.take(d * d);
        let dec_embed_b = c.take(d);
        let dec_queries = c.take(cfg.frames * d);
        let dec_pos = c.take((cfg.latent_tokens + cfg.frames) * d);
        let dec_stack = c.take(stack_len);
        let dec_ln_g = c.take(d);
        let dec_ln_b = c.take(d);
        let out_w = c.take(d * p);
        let out_b = c.take(p);
        VaeLayout {
            embed_w,
            embed_b,
            enc_queries,
            enc_pos,
            enc_stack,
            enc_ln_g,
            enc_ln_b,
            mean_w,
            mean_b,
            logvar_w,
            logvar_b,
            dec_embed_w,
            dec_embed_b,
            dec_queries,
            dec_pos,
            dec_stack,
            dec_ln_g,
            dec_ln_b,
            out_w,
            out_b,
            len: c.len(),
        }
    }
}

/// Classic interleaved sin/cos position code, amplitude `scale`: row r gets
/// sin(r·ω_i) and cos(r·ω_i) with geometrically spaced frequencies.
fn sinusoidal_rows(rows: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |(r, i)| {
        let freq = (10_000f64).powf(-((2 * (i / 2)) as f64) / d as f64);
        let angle = r as f64 * freq;
        scale * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Stack a clip's frames into an F × pose_dim matrix of pose vectors.
pub fn clip_matrix(clip: &MotionClip) -> Array2<f64> {
    let rows: Vec<Array1<f64>> = clip.frames.iter().map(|f| f.to_vec()).collect();
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform row widths")
}

/// A symmetry image of a stacked clip: optionally reverse the frame order,
/// negate the lateral (y) joint columns, and/or negate the roll sine columns.
/// All three are exact invariances of the band-limited angle-track generator
/// (its phases are uniform), so the result is another equally likely clip.
fn symmetry_image(
    x: &Array2<f64>,
    n_joints: usize,
    reverse: bool,
    mirror: bool,
    roll_flip: bool,
) -> Array2<f64> {
    let mut out = if reverse {
        x.slice(s![..;-1, ..]).to_owned()
    } else {
        x.clone()
    };
    if mirror {
        for j in 0..n_joints {
            out.column_mut(3 * j + 1).mapv_inplace(|v| -v);
        }
    }
    if roll_flip {
        for c in (3 * n_joints + 1..out.ncols()).step_by(2) {
            out.column_mut(c).mapv_inplace(|v| -v);
        }
    }
    out
}

struct EncCache {
    x0: Array2<f64>,
    stack: StackCache,
    ln: LnCache,
    h_last: Array2<f64>,
}

struct DecCache {
    x0: Array2<f64>,
    stack: StackCache,
    ln: LnCache,
    h_last: Array2<f64>,
    raw: Array2<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionVae {
    pub config: VaeConfig,
    pub params: Array1<f64>,
}

impl MotionVae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let p_dim = config.pose_dim();
        let ly = VaeLayout::new(&config);
        let mut params = Array1::zeros(ly.len);
        let mut rng = substream(config.seed, 0x7661_6531);
        {
            let ps = params.as_slice_mut().unwrap();
            let fill = |ps: &mut [f64], r: &Range<usize>, rows, cols, std, rng: &mut ChaCha8Rng| {
                let w = normal2(rng, rows, cols, std);
                ps[r.clone()].copy_from_slice(w.as_slice().unwrap());
            };
            let base = 1.0 / (d as f64).sqrt();
            fill(ps, &ly.embed_w, p_dim, d, 1.0 / (p_dim as f64).sqrt(), &mut rng);
            fill(ps, &ly.enc_queries, config.latent_tokens, d, 1.0, &mut rng);
            fill(ps, &ly.enc_pos, config.frames + config.latent_tokens, d, 0.1, &mut rng);
            // frame rows get a sinusoidal time code on top of the noise so
            // temporal order is legible before any training
            {
                let time = sinusoidal_rows(config.frames, d, 0.5);
                let pos = &mut ps[ly.enc_pos.clone()];
                for f in 0..config.frames {
                    for i in 0..d {
                        pos[f * d + i] += time[[f, i]];
                    }
                }
            }
            ps[ly.enc_ln_g.clone()].fill(1.0);
            // mean head at unit scale and log-variance biased low: the
            // posterior starts informative (μ ~ N(0,1), σ ≈ e⁻²) instead of
            // collapsed, otherwise reconstruction stalls for many epochs on
            // the unconditional-average plateau before the encoder path wakes
            fill(ps, &ly.mean_w, d, d, base, &mut rng);
            fill(ps, &ly.logvar_w, d, d, 0.01 * base, &mut rng);
            ps[ly.logvar_b.clone()].fill(-4.0);
            fill(ps, &ly.dec_embed_w, d, d, base, &mut rng);
            // frame queries start as a sinusoidal time code (plus noise to
            // break symmetry): the decoder can address individual frames
            // smoothly from the first step instead of learning 1-of-F codes
            fill(ps, &ly.dec_queries, config.frames, d, 0.3, &mut rng);
            {
                let time = sinusoidal_rows(config.frames, d, 1.0);
                let q = &mut ps[ly.dec_queries.clone()];
                for f in 0..config.frames {
                    for i in 0..d {
                        q[f * d + i] += time[[f, i]];
                    }
                }
            }
            fill(ps, &ly.dec_pos, config.latent_tokens + config.frames, d, 0.1, &mut rng);
            ps[ly.dec_ln_g.clone()].fill(1.0);
            fill(ps, &ly.out_w, d, p_dim, 0.1 * base, &mut rng);
            // twist x-components start at 1 so raw twist rows begin near (1, 0)
            // and the in-graph normalization is well-conditioned
            for t in 0..config.n_twists {
                ps[ly.out_b.start + 3 * config.n_joints + 2 * t] = 1.0;
            }
        }
        let sc = config.stack();
        let enc = alloc_stack(&sc, &mut rng);
        let dec = alloc_stack(&sc, &mut rng);
        {
            let ps = params.as_slice_mut().unwrap();
            ps[ly.enc_stack.clone()].copy_from_slice(enc.as_slice().unwrap());
            ps[ly.dec_stack.clone()].copy_from_slice(dec.as_slice().unwrap());
        }
        Ok(MotionVae { config, params })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let ly = VaeLayout::new(&self.config);
        if self.params.len() != ly.len {
            return shape_err("MotionVae.params", ly.len, self.params.len());
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Degenerate("VAE parameters are non-finite".into()));
        }
        Ok(())
    }

    fn encode_rows(
        &self,
        p: &[f64],
        pose_rows: &Array2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (PosteriorParams, EncCache) {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let ly = VaeLayout::new(cfg);
        let embedded = linear(
            pose_rows,
            &view2(p, &ly.embed_w, cfg.pose_dim(), d),
            &view1(p, &ly.embed_b),
        );
        let queries = view2(p, &ly.enc_queries, cfg.latent_tokens, d).to_owned();
        let mut x0 = ndarray::concatenate(Axis(0), &[embedded.view(), queries.view()])
            .expect("matching widths");
        x0 += &view2(p, &ly.enc_pos, cfg.frames + cfg.latent_tokens, d);

        let sc = cfg.stack();
        let (h, stack) = stack_fwd(&sc, &p[ly.enc_stack.clone()], &x0, rng);
        let (hn, ln) = layernorm(&h, &view1(p, &ly.enc_ln_g), &view1(p, &ly.enc_ln_b));
        let h_last = hn.slice(s![cfg.frames.., ..]).to_owned();
        let mean = linear(&h_last, &view2(p, &ly.mean_w, d, d), &view1(p, &ly.mean_b));
        let logvar = linear(
            &h_last,
            &view2(p, &ly.logvar_w, d, d),
            &view1(p, &ly.logvar_b),
        );
        (
            PosteriorParams { mean, logvar },
            EncCache { x0, stack, ln, h_last },
        )
    }

    fn decode_rows(
        &self,
        p: &[f64],
        z: &Array2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, DecCache) {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let ly = VaeLayout::new(cfg);
        let embedded = linear(
            z,
            &view2(p, &ly.dec_embed_w, d, d),
            &view1(p, &ly.dec_embed_b),
        );
        let queries = view2(p, &ly.dec_queries, cfg.frames, d).to_owned();
        let mut x0 = ndarray::concatenate(Axis(0), &[embedded.view(), queries.view()])
            .expect("matching widths");
        x0 += &view2(p, &ly.dec_pos, cfg.latent_tokens + cfg.frames, d);

        let sc = cfg.stack();
        let (h, stack) = stack_fwd(&sc, &p[ly.dec_stack.clone()], &x0, rng);
        let (hn, ln) = layernorm(&h, &view1(p, &ly.dec_ln_g), &view1(p, &ly.dec_ln_b));
        let h_last = hn.slice(s![cfg.latent_tokens.., ..]).to_owned();
        let raw = linear(
            &h_last,
            &view2(p, &ly.out_w, d, cfg.pose_dim()),
            &view1(p, &ly.out_b),
        );
        let normed = normalize_twist_columns(&raw, cfg.n_joints, cfg.n_twists);
        (
            normed,
            DecCache { x0, stack, ln, h_last, raw },
        )
    }

    /// Deterministic posterior for a clip of exactly F frames.
    pub fn encode(&self, clip: &MotionClip) -> Result<PosteriorParams> {
        self.validate()?;
        if clip.frames.len() != self.config.frames {
            return shape_err("encode frames", self.config.frames, clip.frames.len());
        }
        let rows = clip_matrix(clip);
        if rows.ncols() != self.config.pose_dim() {
            return shape_err("encode pose width", self.config.pose_dim(), rows.ncols());
        }
        let (post, _) = self.encode_rows(self.params.as_slice().unwrap(), &rows, None);
        post.validate()?;
        Ok(post)
    }

    /// Deterministic reconstruction of a latent token matrix into F frames.
    pub fn decode(&self, z: &LatentSeq) -> Result<MotionClip> {
        self.validate()?;
        let want = (self.config.latent_tokens, self.config.latent_dim);
        if z.z.dim() != want {
            return shape_err("decode latent", format!("{want:?}"), format!("{:?}", z.z.dim()));
        }
        let (rows, _) = self.decode_rows(self.params.as_slice().unwrap(), &z.z, None);
        let frames: Result<Vec<PoseFrame>> = rows
            .rows()
            .into_iter()
            .map(|r| PoseFrame::from_vec(&r.to_owned(), self.config.n_joints, self.config.n_twists))
            .collect();
        Ok(MotionClip {
            frames: frames?,
            fps: DEFAULT_FPS,
        })
    }

    /// Decode the posterior mean: the deterministic reconstruction path.
    pub fn reconstruct(&self, clip: &MotionClip) -> Result<MotionClip> {
        let post = self.encode(clip)?;
        self.decode(&LatentSeq { z: post.mean })
    }

    /// Training objective and gradient for one clip. `eps` is the
    /// reparameterization noise (N_Z × D_Z); grads accumulate into `g`.
    /// Returns (total, mse, kl).
    pub fn loss_and_grad(
        &self,
        clip_rows: &Array2<f64>,
        eps: &Array2<f64>,
        mut drop_rng: Option<&mut ChaCha8Rng>,
        g: &mut [f64],
    ) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let d = cfg.latent_dim;
        let p_dim = cfg.pose_dim();
        let ly = VaeLayout::new(cfg);
        let p = self.params.as_slice().unwrap();
        if g.len() != p.len() {
            return shape_err("loss_and_grad grad buffer", p.len(), g.len());
        }
        if clip_rows.dim() != (cfg.frames, p_dim) {
            return shape_err(
                "loss_and_grad clip rows",
                format!("({}, {p_dim})", cfg.frames),
                format!("{:?}", clip_rows.dim()),
            );
        }
        if eps.dim() != (cfg.latent_tokens, d) {
            return shape_err(
                "loss_and_grad eps",
                format!("({}, {d})", cfg.latent_tokens),
                format!("{:?}", eps.dim()),
            );
        }

        let (post, enc_cache) = self.encode_rows(p, clip_rows, drop_rng.as_deref_mut());
        let sigma = post.logvar.mapv(|v| (0.5 * v).exp());
        let z = &post.mean + &(&sigma * eps);
        let (recon, dec_cache) = self.decode_rows(p, &z, drop_rng);

        let n_el = (cfg.frames * p_dim) as f64;
        let diff = &recon - clip_rows;
        let mse = diff.iter().map(|v| v * v).sum::<f64>() / n_el;
        let kl = post
            .mean
            .iter()
            .zip(post.logvar.iter())
            .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum::<f64>();
        let total = mse + cfg.kl_weight * kl;
        if !total.is_finite() {
            return Err(LabError::Degenerate("VAE loss is non-finite".into()));
        }

        // ---- backward: reconstruction branch ----
        let d_recon = diff.mapv(|v| 2.0 * v / n_el);
        let d_raw = normalize_twist_columns_bwd(&dec_cache.raw, &d_recon, cfg.n_joints, cfg.n_twists);
        let (d_hlast, dw_out, db_out) =
            linear_bwd(&dec_cache.h_last, &view2(p, &ly.out_w, d, p_dim), &d_raw);
        accum2(g, &ly.out_w, &dw_out);
        accum1(g, &ly.out_b, &db_out);
        let mut d_hn = Array2::zeros((cfg.latent_tokens + cfg.frames, d));
        d_hn.slice_mut(s![cfg.latent_tokens.., ..]).assign(&d_hlast);
        let (d_h, d_ln_g, d_ln_b) = layernorm_bwd(&dec_cache.ln, &view1(p, &ly.dec_ln_g), &d_hn);
        accum1(g, &ly.dec_ln_g, &d_ln_g);
        accum1(g, &ly.dec_ln_b, &d_ln_b);
        let sc = cfg.stack();
        let d_x0_dec = {
            let (ps, gs) = (&p[ly.dec_stack.clone()], &mut g[ly.dec_stack.clone()]);
            stack_bwd(&sc, ps, &dec_cache.stack, &d_h, gs)
        };
        accum2(g, &ly.dec_pos, &d_x0_dec);
        let d_emb_z = d_x0_dec.slice(s![..cfg.latent_tokens, ..]).to_owned();
        accum2(g, &ly.dec_queries, &d_x0_dec.slice(s![cfg.latent_tokens.., ..]).to_owned());
        let (dz, dw_zemb, db_zemb) = linear_bwd(&z, &view2(p, &ly.dec_embed_w, d, d), &d_emb_z);
        accum2(g, &ly.dec_embed_w, &dw_zemb);
        accum1(g, &ly.dec_embed_b, &db_zemb);

        // ---- reparameterization + KL into posterior grads ----
        // z = μ + σ·ε with σ = exp(lv/2): ∂z/∂lv = σ·ε/2
        let mut d_mean = dz.clone();
        let mut d_logvar = 0.5 * &dz * &sigma * eps;
        d_mean += &post.mean.mapv(|m| cfg.kl_weight * m);
        d_logvar += &post.logvar.mapv(|lv| cfg.kl_weight * 0.5 * (lv.exp() - 1.0));

        // ---- encoder heads and trunk ----
        let (d_hlast_m, dw_mean, db_mean) =
            linear_bwd(&enc_cache.h_last, &view2(p, &ly.mean_w, d, d), &d_mean);
        accum2(g, &ly.mean_w, &dw_mean);
        accum1(g, &ly.mean_b, &db_mean);
        let (d_hlast_v, dw_lv, db_lv) =
            linear_bwd(&enc_cache.h_last, &view2(p, &ly.logvar_w, d, d), &d_logvar);
        accum2(g, &ly.logvar_w, &dw_lv);
        accum1(g, &ly.logvar_b, &db_lv);
        let mut d_hn_enc = Array2::zeros((cfg.frames + cfg.latent_tokens, d));
        d_hn_enc
            .slice_mut(s![cfg.frames.., ..])
            .assign(&(&d_hlast_m + &d_hlast_v));
        let (d_h_enc, dg_enc, db_enc) =
            layernorm_bwd(&enc_cache.ln, &view1(p, &ly.enc_ln_g), &d_hn_enc);
        accum1(g, &ly.enc_ln_g, &dg_enc);
        accum1(g, &ly.enc_ln_b, &db_enc);
        let d_x0_enc = {
            let (ps, gs) = (&p[ly.enc_stack.clone()], &mut g[ly.enc_stack.clone()]);
            stack_bwd(&sc, ps, &enc_cache.stack, &d_h_enc, gs)
        };
        accum2(g, &ly.enc_pos, &d_x0_enc);
        accum2(g, &ly.enc_queries, &d_x0_enc.slice(s![cfg.frames.., ..]).to_owned());
        let d_embedded = d_x0_enc.slice(s![..cfg.frames, ..]).to_owned();
        let (_, dw_emb, db_emb) = linear_bwd(
            clip_rows,
            &view2(p, &ly.embed_w, p_dim, d),
            &d_embedded,
        );
        accum2(g, &ly.embed_w, &dw_emb);
        accum1(g, &ly.embed_b, &db_emb);

        let _ = enc_cache.x0;
        let _ = dec_cache.x0;
        Ok((total, mse, kl))
    }
}

/// Normalize each twist pair inside pose-vector rows to unit length; joint
/// columns pass through.
fn normalize_twist_columns(rows: &Array2<f64>, n_joints: usize, n_twists: usize) -> Array2<f64> {
    let mut out = rows.clone();
    let off = 3 * n_joints;
    for mut row in out.rows_mut() {
        for t in 0..n_twists {
            let (a, b) = (row[off + 2 * t], row[off + 2 * t + 1]);
            let r = (a * a + b * b).sqrt();
            if r < 1e-8 {
                row[off + 2 * t] = 1.0;
                row[off + 2 * t + 1] = 0.0;
            } else {
                row[off + 2 * t] = a / r;
                row[off + 2 * t + 1] = b / r;
            }
        }
    }
    out
}

/// Backward of `normalize_twist_columns`: for y = u/‖u‖,
/// du = (dy − y·(y·dy)) / ‖u‖; degenerate rows get zero gradient.
fn normalize_twist_columns_bwd(
    raw: &Array2<f64>,
    d_out: &Array2<f64>,
    n_joints: usize,
    n_twists: usize,
) -> Array2<f64> {
    let mut d_raw = d_out.clone();
    let off = 3 * n_joints;
    for (row, mut drow) in raw.rows().into_iter().zip(d_raw.rows_mut()) {
        for t in 0..n_twists {
            let (a, b) = (row[off + 2 * t], row[off + 2 * t + 1]);
            let r = (a * a + b * b).sqrt();
            let (da, db) = (drow[off + 2 * t], drow[off + 2 * t + 1]);
            if r < 1e-8 {
                drow[off + 2 * t] = 0.0;
                drow[off + 2 * t + 1] = 0.0;
            } else {
                let (ya, yb) = (a / r, b / r);
                let dot = ya * da + yb * db;
                drow[off + 2 * t] = (da - ya * dot) / r;
                drow[off + 2 * t + 1] = (db - yb * dot) / r;
            }
        }
    }
    d_raw
}

/// MSE + weighted KL for a clip/reconstruction pair. Returns
/// (total, mse, kl) with total = mse + kl_weight·kl. MSE is the mean over
/// all pose-vector elements; KL is the closed-form divergence of the
/// diagonal posterior from the standard normal, summed over latent elements.
pub fn vae_loss(
    clip: &MotionClip,
    reconstruction: &MotionClip,
    posterior: &PosteriorParams,
    kl_weight: f64,
) -> Result<(f64, f64, f64)> {
    if clip.frames.len() != reconstruction.frames.len() {
        return shape_err("vae_loss frames", clip.frames.len(), reconstruction.frames.len());
    }
    posterior.validate()?;
    let a = clip_matrix(clip);
    let b = clip_matrix(reconstruction);
    if a.dim() != b.dim() {
        return shape_err(
            "vae_loss pose width",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        );
    }
    let mse = (&a - &b).iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
    let kl = posterior
        .mean
        .iter()
        .zip(posterior.logvar.iter())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>();
    Ok((mse + kl_weight * kl, mse, kl))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VaeTrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Train on random symmetry images of each clip (time reversal, lateral
    /// mirror, roll flip). The kinematic generator is invariant under all
    /// three, so this multiplies effective data without leaving the clip
    /// distribution.
    pub augment: bool,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
    /// Reconstruction joint error on the held-out set, when one is supplied.
    pub holdout_mpjpe: Option<f64>,
}

/// Mean reconstruction joint error (posterior-mean decode) over clips.
pub fn reconstruction_error(vae: &MotionVae, clips: &[MotionClip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(LabError::Empty("reconstruction_error clips"));
    }
    let mut sum = 0.0;
    for clip in clips {
        let recon = vae.reconstruct(clip)?;
        sum += crate::metrics::mpjpe_clip(&recon.frames, &clip.frames)?;
    }
    Ok(sum / clips.len() as f64)
}

/// Minibatch Adam training with reparameterized sampling, a short linear
/// learning-rate warmup, and a cosine decay from `lr` down to `lr`/10
/// across the epochs. Every
/// clip must already have exactly F frames (resample first). If `holdout` is
/// non-empty its reconstruction error is recorded each epoch. Aborts with a
/// diagnostic if the loss goes non-finite.
pub fn train_vae(
    vae: &mut MotionVae,
    dataset: &[MotionClip],
    holdout: &[MotionClip],
    opts: &VaeTrainOpts,
) -> Result<Vec<EpochLoss>> {
    vae.validate()?;
    if dataset.is_empty() {
        return Err(LabError::Empty("train_vae dataset"));
    }
    if opts.epochs == 0 || opts.batch == 0 || !(opts.lr > 0.0) {
        return Err(LabError::InvalidArgument(
            "train_vae needs epochs ≥ 1, batch ≥ 1, lr > 0".into(),
        ));
    }
    for (i, c) in dataset.iter().chain(holdout.iter()).enumerate() {
        if c.frames.len() != vae.config.frames {
            return shape_err("train_vae clip frames", vae.config.frames, format!("clip {i}: {}", c.frames.len()));
        }
    }
    let rows: Vec<Array2<f64>> = dataset.iter().map(clip_matrix).collect();
    let n_params = vae.params.len();
    let mut adam = Adam::new(AdamConfig::new(opts.lr), n_params);
    let mut rng = substream(opts.seed, 0x7674_7261);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut grad = vec![0.0; n_params];

    // Short linear warmup (1/30 of the budget) keeps the first epochs'
    // descent steady, then cosine decay from `lr` down to `lr`/10.
    let warmup = (opts.epochs / 30).max(1) as f64;
    for epoch in 0..opts.epochs {
        let progress = if opts.epochs > 1 {
            epoch as f64 / (opts.epochs - 1) as f64
        } else {
            0.0
        };
        let ramp = (((epoch + 1) as f64) / warmup).min(1.0);
        adam.cfg.lr =
            opts.lr * ramp * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut rng);
        let mut ep_total = 0.0;
        let mut ep_mse = 0.0;
        let mut ep_kl = 0.0;
        for chunk in order.chunks(opts.batch) {
            grad.iter_mut().for_each(|v| *v = 0.0);
            for &ci in chunk {
                let x: std::borrow::Cow<Array2<f64>> = if opts.augment {
                    let (rev, mir, roll) =
                        (rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5));
                    std::borrow::Cow::Owned(symmetry_image(
                        &rows[ci],
                        vae.config.n_joints,
                        rev,
                        mir,
                        roll,
                    ))
                } else {
                    std::borrow::Cow::Borrowed(&rows[ci])
                };
                let eps = Array2::from_shape_fn(
                    (vae.config.latent_tokens, vae.config.latent_dim),
                    |_| rng.sample::<f64, _>(StandardNormal),
                );
                let use_dropout = vae.config.dropout > 0.0;
                let (total, mse, kl) = vae.loss_and_grad(
                    &x,
                    &eps,
                    if use_dropout { Some(&mut rng) } else { None },
                    &mut grad,
                )?;
                if !total.is_finite() {
                    return Err(LabError::Diverged { epoch, loss: total });
                }
                ep_total += total;
                ep_mse += mse;
                ep_kl += kl;
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(vae.params.as_slice_mut().unwrap(), &grad);
        }
        let n = dataset.len() as f64;
        let holdout_mpjpe = if holdout.is_empty() {
            None
        } else {
            Some(reconstruction_error(vae, holdout)?)
        };
        let rec = EpochLoss {
            epoch,
            total: ep_total / n,
            mse: ep_mse / n,
            kl: ep_kl / n,
            holdout_mpjpe,
        };
        if !rec.total.is_finite() {
            return Err(LabError::Diverged { epoch, loss: rec.total });
        }
        curve.push(rec);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{generate_clip, resample_clip, SynthScene};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> VaeConfig {
        VaeConfig {
            frames: 6,
            latent_tokens: 2,
            latent_dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 16,
            dropout: 0.0,
            kl_weight: 1e-4,
            n_joints: 3,
            n_twists: 2,
            seed: 7,
        }
    }

    fn toy_config() -> VaeConfig {
        VaeConfig {
            frames: 12,
            latent_tokens: 2,
            latent_dim: 16,
            layers: 2,
            heads: 4,
            ff_dim: 32,
            dropout: 0.0,
            kl_weight: 1e-4,
            n_joints: 8,
            n_twists: 7,
            seed: 11,
        }
    }

    fn toy_clips(cfg: &VaeConfig, n: usize, seed: u64) -> Vec<MotionClip> {
        (0..n)
            .map(|i| {
                let scene = SynthScene::toy(seed + i as u64);
                let (clip, _, _) = generate_clip(&scene, 20).unwrap();
                resample_clip(&clip, cfg.frames).unwrap()
            })
            .collect()
    }

    fn zero_clip(cfg: &VaeConfig) -> MotionClip {
        let frames = (0..cfg.frames)
            .map(|_| PoseFrame {
                joints: Array2::zeros((cfg.n_joints, 3)),
                twists: Array2::from_shape_fn((cfg.n_twists, 2), |(_, c)| {
                    if c == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }),
            })
            .collect();
        MotionClip {
            frames,
            fps: DEFAULT_FPS,
        }
    }

    #[test]
    fn kl_hand_case_and_zero_cases() {
        let cfg = tiny_config();
        let vae = MotionVae::new(cfg).unwrap();
        let clip = zero_clip(&cfg);
        // posterior = standard normal → kl = 0; recon = clip → mse = 0
        let std_post = PosteriorParams {
            mean: Array2::zeros((1, 2)),
            logvar: Array2::zeros((1, 2)),
        };
        let (total, mse, kl) = vae_loss(&clip, &clip, &std_post, 0.5).unwrap();
        assert_abs_diff_eq!(mse, 0.0);
        assert_abs_diff_eq!(kl, 0.0);
        assert_abs_diff_eq!(total, 0.0);
        // mean (1,0), log-var (0,0) → kl = (1 + 1 − 1 − 0)/2 + (0 + 1 − 1 − 0)/2 = 0.5
        let post = PosteriorParams {
            mean: ndarray::array![[1.0, 0.0]],
            logvar: Array2::zeros((1, 2)),
        };
        let (total, mse, kl) = vae_loss(&clip, &clip, &post, 2.0).unwrap();
        assert_abs_diff_eq!(kl, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mse, 0.0);
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let _ = vae;
    }

    #[test]
    fn kl_is_nonnegative_for_random_posteriors() {
        let mut rng = seeded(20);
        let clip = zero_clip(&tiny_config());
        for _ in 0..200 {
            let post = PosteriorParams {
                mean: normal2(&mut rng, 3, 4, 2.0),
                logvar: normal2(&mut rng, 3, 4, 1.5),
            };
            let (_, _, kl) = vae_loss(&clip, &clip, &post, 1.0).unwrap();
            assert!(kl >= -1e-12, "kl {kl} must be ≥ 0");
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = toy_config();
        let vae = MotionVae::new(cfg).unwrap();
        let clip = &toy_clips(&cfg, 1, 50)[0];
        let a = vae.encode(clip).unwrap();
        let b = vae.encode(clip).unwrap();
        assert_eq!(a.mean.dim(), (2, 16));
        assert_eq!(a.logvar.dim(), (2, 16));
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.logvar, b.logvar);
        // wrong frame count is rejected
        let short = resample_clip(clip, 5).unwrap();
        assert!(vae.encode(&short).is_err());
    }

    #[test]
    fn encode_zero_clip_is_finite() {
        let cfg = tiny_config();
        let vae = MotionVae::new(cfg).unwrap();
        let post = vae.encode(&zero_clip(&cfg)).unwrap();
        post.validate().unwrap();
    }

    #[test]
    fn decode_shapes_twists_and_determinism() {
        let cfg = toy_config();
        let vae = MotionVae::new(cfg).unwrap();
        let mut rng = seeded(51);
        let z = LatentSeq {
            z: normal2(&mut rng, 2, 16, 1.0),
        };
        let a = vae.decode(&z).unwrap();
        let b = vae.decode(&z).unwrap();
        assert_eq!(a.frames.len(), cfg.frames);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.joints, fb.joints);
            for t in fa.twists.rows() {
                let norm = (t[0] * t[0] + t[1] * t[1]).sqrt();
                assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
            }
        }
        let bad = LatentSeq {
            z: normal2(&mut rng, 3, 16, 1.0),
        };
        assert!(vae.decode(&bad).is_err());
    }

    #[test]
    fn shape_contracts_across_configs() {
        for (f, nz, d, heads) in [(4, 1, 4, 1), (8, 3, 8, 2), (10, 10, 12, 4)] {
            let cfg = VaeConfig {
                frames: f,
                latent_tokens: nz,
                latent_dim: d,
                layers: 1,
                heads,
                ff_dim: 2 * d,
                dropout: 0.0,
                kl_weight: 1e-4,
                n_joints: 4,
                n_twists: 3,
                seed: 1,
            };
            let vae = MotionVae::new(cfg).unwrap();
            let clip = zero_clip(&cfg);
            let post = vae.encode(&clip).unwrap();
            assert_eq!(post.mean.dim(), (nz, d));
            let rec = vae.decode(&LatentSeq { z: post.mean }).unwrap();
            assert_eq!(rec.frames.len(), f);
            assert_eq!(rec.frames[0].joints.dim(), (4, 3));
        }
        // latent_tokens > frames is rejected
        let mut bad = tiny_config();
        bad.latent_tokens = bad.frames + 1;
        assert!(MotionVae::new(bad).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let mut vae = MotionVae::new(cfg).unwrap();
        let mut rng = seeded(61);
        // arbitrary target rows of the right width are enough for a
        // gradient check; no kinematic validity needed
        let rows = normal2(&mut rng, cfg.frames, cfg.pose_dim(), 0.5);
        let eps = normal2(&mut rng, cfg.latent_tokens, cfg.latent_dim, 1.0);

        let n = vae.params.len();
        let mut g = vec![0.0; n];
        let (total, _, _) = vae.loss_and_grad(&rows, &eps, None, &mut g).unwrap();
        assert!(total.is_finite());

        let h = 1e-5;
        let stride = (n / 151).max(1);
        let mut checked = 0;
        for idx in (0..n).step_by(stride) {
            let orig = vae.params[idx];
            vae.params[idx] = orig + h;
            let mut scratch = vec![0.0; n];
            let (up, _, _) = vae.loss_and_grad(&rows, &eps, None, &mut scratch).unwrap();
            vae.params[idx] = orig - h;
            scratch.iter_mut().for_each(|v| *v = 0.0);
            let (down, _, _) = vae.loss_and_grad(&rows, &eps, None, &mut scratch).unwrap();
            vae.params[idx] = orig;
            let num = (up - down) / (2.0 * h);
            assert!(
                (g[idx] - num).abs() < 1e-6 + 1e-3 * num.abs(),
                "param {idx}: analytic {} numeric {num}",
                g[idx]
            );
            checked += 1;
        }
        assert!(checked > 100, "checked {checked} parameters");
    }

    #[test]
    fn training_smoke_loss_decreases() {
        let cfg = toy_config();
        let mut vae = MotionVae::new(cfg).unwrap();
        let clips = toy_clips(&cfg, 4, 70);
        let opts = VaeTrainOpts {
            epochs: 5,
            lr: 1e-3,
            batch: 4,
            seed: 3,
            augment: true,
        };
        let curve = train_vae(&mut vae, &clips, &[], &opts).unwrap();
        assert_eq!(curve.len(), 5);
        let first = curve[0].total;
        assert!(
            curve[1..].iter().any(|e| e.total < first),
            "some early epoch should beat the first"
        );
    }

    #[test]
    fn zero_kl_weight_trains_as_autoencoder() {
        let mut cfg = toy_config();
        cfg.kl_weight = 0.0;
        let mut vae = MotionVae::new(cfg).unwrap();
        let clips = toy_clips(&cfg, 4, 80);
        let opts = VaeTrainOpts {
            epochs: 50,
            lr: 1e-3,
            batch: 4,
            seed: 4,
            augment: false,
        };
        let curve = train_vae(&mut vae, &clips, &[], &opts).unwrap();
        let last = curve.last().unwrap();
        assert!(
            last.mse < curve[0].mse,
            "mse should fall: {} → {}",
            curve[0].mse,
            last.mse
        );
        assert_abs_diff_eq!(last.total, last.mse); // no KL term
    }

    #[test]
    fn training_is_reproducible_per_seed() {
        let cfg = toy_config();
        let clips = toy_clips(&cfg, 3, 90);
        let opts = VaeTrainOpts {
            epochs: 3,
            lr: 1e-3,
            batch: 2,
            seed: 12,
            augment: true,
        };
        let mut a = MotionVae::new(cfg).unwrap();
        let ca = train_vae(&mut a, &clips, &[], &opts).unwrap();
        let mut b = MotionVae::new(cfg).unwrap();
        let cb = train_vae(&mut b, &clips, &[], &opts).unwrap();
        assert_eq!(a.params, b.params);
        for (x, y) in ca.iter().zip(&cb) {
            assert_eq!(x.total, y.total);
        }
    }

    #[test]
    fn holdout_curve_is_recorded() {
        let cfg = toy_config();
        let mut vae = MotionVae::new(cfg).unwrap();
        let clips = toy_clips(&cfg, 3, 95);
        let hold = toy_clips(&cfg, 2, 99);
        let opts = VaeTrainOpts {
            epochs: 2,
            lr: 1e-3,
            batch: 3,
            seed: 5,
            augment: false,
        };
        let curve = train_vae(&mut vae, &clips, &hold, &opts).unwrap();
        assert!(curve.iter().all(|e| e.holdout_mpjpe.is_some()));
        assert!(curve[0].holdout_mpjpe.unwrap() > 0.0);
    }

    #[test]
    fn checkpoint_serde_round_trip() {
        let cfg = tiny_config();
        let vae = MotionVae::new(cfg).unwrap();
        let json = serde_json::to_string(&vae).unwrap();
        let back: MotionVae = serde_json::from_str(&json).unwrap();
        assert_eq!(back.params, vae.params);
        assert_eq!(back.config, vae.config);
        back.validate().unwrap();
    }
}
