//! Latent diffusion over motion-VAE latents: scaled-linear noise schedule
//! with a zero-terminal-SNR rescale, closed-form forward noising, velocity
//! (v) parameterization with its exact inversions, a conditional transformer
//! denoiser with U-shaped long skip connections, a deterministic sampler
//! (single- or few-step), and the hybrid v/noise training loop.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{shape_err, LabError, Result};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::ops::{
    accum1, accum2, gelu, gelu_bwd, layernorm, layernorm_bwd, linear, linear_bwd, view1, view2,
    Cursor, LnCache,
};
use crate::nn::stack::{alloc_stack, stack_bwd, stack_fwd, StackCache, StackConfig};
use crate::pose::{Augmentation, MotionClip};
use crate::rng::{normal2, substream};
use crate::vae::{LatentSeq, MotionVae};

/// Noise schedule tables, 1-indexed by timestep t ∈ 1..=T.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// ᾱ_t after the optional zero-terminal rescale; betas/alphas keep their
    /// pre-rescale values.
    pub alpha_bars: Vec<f64>,
    pub zero_terminal: bool,
}

impl DiffusionSchedule {
    /// ᾱ_t with the convention ᾱ_0 = 1 (clean data).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.t_steps {
            return Err(LabError::InvalidArgument(format!(
                "timestep {t} outside 0..={}",
                self.t_steps
            )));
        }
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0
            || self.betas.len() != self.t_steps
            || self.alphas.len() != self.t_steps
            || self.alpha_bars.len() != self.t_steps
        {
            return shape_err(
                "DiffusionSchedule tables",
                self.t_steps,
                format!(
                    "betas {}, alphas {}, alpha_bars {}",
                    self.betas.len(),
                    self.alphas.len(),
                    self.alpha_bars.len()
                ),
            );
        }
        for (t, (&b, &a)) in self.betas.iter().zip(&self.alphas).enumerate() {
            if !(0.0..1.0).contains(&b) || b <= 0.0 {
                return Err(LabError::InvalidArgument(format!(
                    "beta[{}] = {b} outside (0, 1)",
                    t + 1
                )));
            }
            if (a - (1.0 - b)).abs() > 1e-15 {
                return Err(LabError::InvalidArgument(format!(
                    "alpha[{}] ≠ 1 − beta",
                    t + 1
                )));
            }
        }
        for w in self.alpha_bars.windows(2) {
            if w[1] >= w[0] {
                return Err(LabError::InvalidArgument(
                    "alpha_bar must be strictly decreasing".into(),
                ));
            }
        }
        if self.zero_terminal && self.alpha_bars[self.t_steps - 1].sqrt() > 1e-12 {
            return Err(LabError::InvalidArgument(
                "zero-terminal schedule must end at √ᾱ_T = 0".into(),
            ));
        }
        Ok(())
    }
}

/// Build a scaled-linear schedule: β_t = (√β_start + (t−1)/(T−1)·(√β_end −
/// √β_start))². With `zero_terminal`, the √ᾱ table is affinely rescaled so
/// the final entry is exactly 0 while the first is preserved.
pub fn build_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    zero_terminal: bool,
) -> Result<DiffusionSchedule> {
    if t_steps < 2 {
        return Err(LabError::InvalidArgument("need T ≥ 2 steps".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(LabError::InvalidArgument(format!(
            "need 0 < beta_start ({beta_start}) < beta_end ({beta_end}) < 1"
        )));
    }
    let sb_start = beta_start.sqrt();
    let sb_end = beta_end.sqrt();
    let mut betas = Vec::with_capacity(t_steps);
    let mut alphas = Vec::with_capacity(t_steps);
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for t in 1..=t_steps {
        let sb = sb_start + (t - 1) as f64 / (t_steps - 1) as f64 * (sb_end - sb_start);
        let beta = sb * sb;
        betas.push(beta);
        alphas.push(1.0 - beta);
        prod *= 1.0 - beta;
        alpha_bars.push(prod);
    }
    if zero_terminal {
        let s: Vec<f64> = alpha_bars.iter().map(|v| v.sqrt()).collect();
        let s1 = s[0];
        let st = s[t_steps - 1];
        for (ab, &sv) in alpha_bars.iter_mut().zip(&s) {
            let rescaled = (sv - st) * s1 / (s1 - st);
            *ab = rescaled * rescaled;
        }
        // the affine map sends the terminal entry to 0 up to rounding; pin it
        alpha_bars[t_steps - 1] = 0.0;
    }
    let schedule = DiffusionSchedule {
        t_steps,
        betas,
        alphas,
        alpha_bars,
        zero_terminal,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Closed-form forward noising: Z_t = √ᾱ_t·Z_0 + √(1−ᾱ_t)·ε.
pub fn forward_diffuse(
    schedule: &DiffusionSchedule,
    z0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
) -> Result<Array2<f64>> {
    if t < 1 {
        return Err(LabError::InvalidArgument("timestep must be ≥ 1".into()));
    }
    if z0.dim() != eps.dim() {
        return shape_err(
            "forward_diffuse eps",
            format!("{:?}", z0.dim()),
            format!("{:?}", eps.dim()),
        );
    }
    let sa = schedule.sqrt_alpha_bar(t)?;
    let so = schedule.sqrt_one_minus_alpha_bar(t)?;
    Ok(z0.mapv(|v| sa * v) + eps.mapv(|v| so * v))
}

/// Velocity target: v_t = √ᾱ_t·ε − √(1−ᾱ_t)·Z_0.
pub fn v_target(
    schedule: &DiffusionSchedule,
    z0: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    if z0.dim() != eps.dim() {
        return shape_err(
            "v_target eps",
            format!("{:?}", z0.dim()),
            format!("{:?}", eps.dim()),
        );
    }
    let sa = schedule.sqrt_alpha_bar(t)?;
    let so = schedule.sqrt_one_minus_alpha_bar(t)?;
    Ok(eps.mapv(|v| sa * v) - z0.mapv(|v| so * v))
}

/// Exact inversion of the v-parameterization: Ẑ_0 = √ᾱ_t·Z_t − √(1−ᾱ_t)·v.
pub fn recover_z0(
    schedule: &DiffusionSchedule,
    z_t: &Array2<f64>,
    v: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    if z_t.dim() != v.dim() {
        return shape_err(
            "recover_z0 v",
            format!("{:?}", z_t.dim()),
            format!("{:?}", v.dim()),
        );
    }
    let sa = schedule.sqrt_alpha_bar(t)?;
    let so = schedule.sqrt_one_minus_alpha_bar(t)?;
    Ok(z_t.mapv(|v| sa * v) - v.mapv(|w| so * w))
}

/// The companion inversion: ε̂ = √ᾱ_t·v + √(1−ᾱ_t)·Z_t.
pub fn recover_eps(
    schedule: &DiffusionSchedule,
    z_t: &Array2<f64>,
    v: &Array2<f64>,
    t: usize,
) -> Result<Array2<f64>> {
    let sa = schedule.sqrt_alpha_bar(t)?;
    let so = schedule.sqrt_one_minus_alpha_bar(t)?;
    Ok(v.mapv(|w| sa * w) + z_t.mapv(|w| so * w))
}

/// A noising draw bundled with its targets.
#[derive(Clone, Debug)]
pub struct NoisePair {
    pub z_t: Array2<f64>,
    pub epsilon: Array2<f64>,
    pub t: usize,
    pub v_t: Array2<f64>,
}

pub fn noise_pair(
    schedule: &DiffusionSchedule,
    z0: &Array2<f64>,
    t: usize,
    eps: Array2<f64>,
) -> Result<NoisePair> {
    let z_t = forward_diffuse(schedule, z0, t, &eps)?;
    let v_t = v_target(schedule, z0, &eps, t)?;
    Ok(NoisePair {
        z_t,
        epsilon: eps,
        t,
        v_t,
    })
}

/// Hybrid objective: λ1·‖v̂ − v_t‖² + λ2·‖ε̂ − ε‖² with ε̂ derived from v̂ by
/// the exact inversion. Returns (total, v_term, eps_term); norms are sums of
/// squares over all elements.
pub fn hybrid_loss(
    schedule: &DiffusionSchedule,
    v_hat: &Array2<f64>,
    z_t: &Array2<f64>,
    t: usize,
    z0: &Array2<f64>,
    eps: &Array2<f64>,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, f64, f64)> {
    let v_true = v_target(schedule, z0, eps, t)?;
    if v_hat.dim() != v_true.dim() {
        return shape_err(
            "hybrid_loss v_hat",
            format!("{:?}", v_true.dim()),
            format!("{:?}", v_hat.dim()),
        );
    }
    let v_term = (v_hat - &v_true).iter().map(|d| d * d).sum();
    let eps_hat = recover_eps(schedule, z_t, v_hat, t)?;
    let eps_term = (&eps_hat - eps).iter().map(|d| d * d).sum();
    Ok((lambda1 * v_term + lambda2 * eps_term, v_term, eps_term))
}

/// Anything that predicts velocity for latent tokens given a timestep and a
/// per-frame condition matrix.
pub trait VelocityModel {
    /// (latent tokens, latent width) this model operates on.
    fn latent_shape(&self) -> (usize, usize);
    fn velocity(&self, z_t: &Array2<f64>, t: usize, condition: &Array2<f64>)
        -> Result<Array2<f64>>;
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    /// Latent width D_Z (also the trunk width); must be even for the
    /// sinusoidal timestep embedding.
    pub dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Condition feature width D_F.
    pub cond_dim: usize,
    /// Condition rows F (one feature vector per frame).
    pub cond_frames: usize,
    pub latent_tokens: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.ff_dim == 0
            || self.cond_dim == 0
            || self.cond_frames == 0
            || self.latent_tokens == 0
        {
            return Err(LabError::InvalidArgument(
                "all denoiser dimensions must be ≥ 1".into(),
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(LabError::InvalidArgument(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 2 != 0 {
            return Err(LabError::InvalidArgument(
                "dim must be even (sin/cos timestep embedding)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LabError::InvalidArgument("dropout must be in [0,1)".into()));
        }
        Ok(())
    }

    fn stack(&self) -> StackConfig {
        StackConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ff: self.ff_dim,
            dropout: self.dropout,
            long_skip: true,
        }
    }

    fn tokens(&self) -> usize {
        self.cond_frames + self.latent_tokens
    }
}

/// Sinusoidal timestep features: cos half then sin half ("flip sin to cos"
/// ordering), geometric frequencies 10000^(−i/half).
fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

struct DenoiserLayout {
    cond_w: Range<usize>,
    cond_b: Range<usize>,
    t_w1: Range<usize>,
    t_b1: Range<usize>,
    t_w2: Range<usize>,
    t_b2: Range<usize>,
    pos: Range<usize>,
    stack: Range<usize>,
    ln_g: Range<usize>,
    ln_b: Range<usize>,
    v_w: Range<usize>,
    v_b: Range<usize>,
    len: usize,
}

impl DenoiserLayout {
    fn new(cfg: &DenoiserConfig) -> Self {
        let d = cfg.dim;
        let mut c = Cursor::new();
        let cond_w = c.take(cfg.cond_dim * d);
        let cond_b = c.take(d);
        let t_w1 = c.take(d * 2 * d);
        let t_b1 = c.take(2 * d);
        let t_w2 = c.take(2 * d * d);
        let t_b2 = c.take(d);
        let pos = c.take(cfg.tokens() * d);
        let stack = c.take(cfg.stack().param_len());
        let ln_g = c.take(d);
        let ln_b = c.take(d);
        let v_w = c.take(d * d);
        let v_b = c.take(d);
        DenoiserLayout {
            cond_w,
            cond_b,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            pos,
            stack,
            ln_g,
            ln_b,
            v_w,
            v_b,
            len: c.len(),
        }
    }
}

struct DenoiserCache {
    t_feat: Array1<f64>,
    t_h_pre: Array2<f64>,
    t_h: Array2<f64>,
    stack: StackCache,
    ln: LnCache,
    h_last: Array2<f64>,
}

/// Conditional velocity predictor: condition rows are projected into the
/// latent width and prepended to the noisy latent tokens, a timestep
/// embedding is broadcast-added, and a U-skip transformer runs; only the
/// latent-token rows feed the velocity head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Array1<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let ly = DenoiserLayout::new(&config);
        let d = config.dim;
        let mut params = Array1::zeros(ly.len);
        let mut rng = substream(config.seed, 0x6465_6e6f);
        {
            let ps = params.as_slice_mut().unwrap();
            let fill = |r: &Range<usize>, rows: usize, cols: usize, std: f64,
                        rng: &mut ChaCha8Rng, ps: &mut [f64]| {
                let w = normal2(rng, rows, cols, std);
                ps[r.clone()].copy_from_slice(w.as_slice().unwrap());
            };
            let base = 1.0 / (d as f64).sqrt();
            fill(&ly.cond_w, config.cond_dim, d, 1.0 / (config.cond_dim as f64).sqrt(), &mut rng, ps);
            fill(&ly.t_w1, d, 2 * d, base, &mut rng, ps);
            fill(&ly.t_w2, 2 * d, d, 0.5 * base, &mut rng, ps);
            fill(&ly.pos, config.tokens(), d, 0.1, &mut rng, ps);
            ps[ly.ln_g.clone()].fill(1.0);
            // velocity head starts at zero: predictions begin at 0, a neutral
            // point for both the v and derived-noise terms
        }
        let stack = alloc_stack(&config.stack(), &mut rng);
        params.as_slice_mut().unwrap()[ly.stack.clone()]
            .copy_from_slice(stack.as_slice().unwrap());
        Ok(Denoiser { config, params })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let ly = DenoiserLayout::new(&self.config);
        if self.params.len() != ly.len {
            return shape_err("Denoiser.params", ly.len, self.params.len());
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Degenerate("denoiser parameters non-finite".into()));
        }
        Ok(())
    }

    fn forward(
        &self,
        z_t: &Array2<f64>,
        t: usize,
        condition: &Array2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, DenoiserCache)> {
        let cfg = &self.config;
        let d = cfg.dim;
        if z_t.dim() != (cfg.latent_tokens, d) {
            return shape_err(
                "denoise latent",
                format!("({}, {d})", cfg.latent_tokens),
                format!("{:?}", z_t.dim()),
            );
        }
        if condition.dim() != (cfg.cond_frames, cfg.cond_dim) {
            return shape_err(
                "denoise condition",
                format!("({}, {})", cfg.cond_frames, cfg.cond_dim),
                format!("{:?}", condition.dim()),
            );
        }
        let ly = DenoiserLayout::new(cfg);
        let p = self.params.as_slice().unwrap();

        let cond = linear(
            condition,
            &view2(p, &ly.cond_w, cfg.cond_dim, d),
            &view1(p, &ly.cond_b),
        );
        let t_feat = timestep_features(t, d);
        let t_row = t_feat.view().insert_axis(Axis(0)).to_owned();
        let t_h_pre = linear(&t_row, &view2(p, &ly.t_w1, d, 2 * d), &view1(p, &ly.t_b1));
        let t_h = gelu(&t_h_pre);
        let t_emb = linear(&t_h, &view2(p, &ly.t_w2, 2 * d, d), &view1(p, &ly.t_b2));

        let mut x0 = ndarray::concatenate(Axis(0), &[cond.view(), z_t.view()])
            .expect("matching widths");
        x0 += &view2(p, &ly.pos, cfg.tokens(), d);
        x0 += &t_emb.row(0);

        let (h, stack) = stack_fwd(&cfg.stack(), &p[ly.stack.clone()], &x0, rng);
        let (hn, ln) = layernorm(&h, &view1(p, &ly.ln_g), &view1(p, &ly.ln_b));
        let h_last = hn.slice(s![cfg.cond_frames.., ..]).to_owned();
        let v_hat = linear(&h_last, &view2(p, &ly.v_w, d, d), &view1(p, &ly.v_b));
        if v_hat.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Degenerate("denoiser output non-finite".into()));
        }
        Ok((
            v_hat,
            DenoiserCache {
                t_feat,
                t_h_pre,
                t_h,
                stack,
                ln,
                h_last,
            },
        ))
    }

    /// Deterministic velocity prediction (inference mode).
    pub fn denoise(
        &self,
        z_t: &Array2<f64>,
        t: usize,
        condition: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward(z_t, t, condition, None)?.0)
    }

    /// Hybrid objective and parameter gradient for one (clip, t, ε) draw.
    /// Accumulates into `g`; returns (total, v_term, eps_term).
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grad(
        &self,
        schedule: &DiffusionSchedule,
        z0: &Array2<f64>,
        condition: &Array2<f64>,
        t: usize,
        eps: &Array2<f64>,
        lambda1: f64,
        lambda2: f64,
        rng: Option<&mut ChaCha8Rng>,
        g: &mut [f64],
    ) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let d = cfg.dim;
        let ly = DenoiserLayout::new(cfg);
        let p = self.params.as_slice().unwrap();
        if g.len() != p.len() {
            return shape_err("denoiser grad buffer", p.len(), g.len());
        }
        let pair = noise_pair(schedule, z0, t, eps.clone())?;
        let (v_hat, cache) = self.forward(&pair.z_t, t, condition, rng)?;

        let v_term: f64 = (&v_hat - &pair.v_t).iter().map(|x| x * x).sum();
        let eps_hat = recover_eps(schedule, &pair.z_t, &v_hat, t)?;
        let eps_term: f64 = (&eps_hat - &pair.epsilon).iter().map(|x| x * x).sum();
        let total = lambda1 * v_term + lambda2 * eps_term;
        if !total.is_finite() {
            return Err(LabError::Degenerate("hybrid loss non-finite".into()));
        }

        // d total / d v̂:
        //   v term: 2λ1(v̂ − v)
        //   ε term: ε̂ = √ᾱ·v̂ + √(1−ᾱ)·Z_t ⇒ 2λ2·√ᾱ·(ε̂ − ε)
        let sa = schedule.sqrt_alpha_bar(t)?;
        let d_vhat = (&v_hat - &pair.v_t).mapv(|x| 2.0 * lambda1 * x)
            + (&eps_hat - &pair.epsilon).mapv(|x| 2.0 * lambda2 * sa * x);

        let (d_hlast, dw_v, db_v) = linear_bwd(&cache.h_last, &view2(p, &ly.v_w, d, d), &d_vhat);
        accum2(g, &ly.v_w, &dw_v);
        accum1(g, &ly.v_b, &db_v);
        let mut d_hn = Array2::zeros((cfg.tokens(), d));
        d_hn.slice_mut(s![cfg.cond_frames.., ..]).assign(&d_hlast);
        let (d_h, d_ln_g, d_ln_b) = layernorm_bwd(&cache.ln, &view1(p, &ly.ln_g), &d_hn);
        accum1(g, &ly.ln_g, &d_ln_g);
        accum1(g, &ly.ln_b, &d_ln_b);
        let d_x0 = {
            let (ps, gs) = (&p[ly.stack.clone()], &mut g[ly.stack.clone()]);
            stack_bwd(&cfg.stack(), ps, &cache.stack, &d_h, gs)
        };
        accum2(g, &ly.pos, &d_x0);
        // timestep embedding was broadcast to every row
        let d_temb = d_x0.sum_axis(Axis(0)).insert_axis(Axis(0));
        let (d_th, dw_t2, db_t2) = linear_bwd(&cache.t_h, &view2(p, &ly.t_w2, 2 * d, d), &d_temb);
        accum2(g, &ly.t_w2, &dw_t2);
        accum1(g, &ly.t_b2, &db_t2);
        let d_th_pre = gelu_bwd(&cache.t_h_pre, &d_th);
        let t_row = cache.t_feat.view().insert_axis(Axis(0)).to_owned();
        let (_, dw_t1, db_t1) = linear_bwd(&t_row, &view2(p, &ly.t_w1, d, 2 * d), &d_th_pre);
        accum2(g, &ly.t_w1, &dw_t1);
        accum1(g, &ly.t_b1, &db_t1);
        let d_cond_rows = d_x0.slice(s![..cfg.cond_frames, ..]).to_owned();
        let (_, dw_c, db_c) = linear_bwd(
            condition,
            &view2(p, &ly.cond_w, cfg.cond_dim, d),
            &d_cond_rows,
        );
        accum2(g, &ly.cond_w, &dw_c);
        accum1(g, &ly.cond_b, &db_c);
        Ok((total, v_term, eps_term))
    }
}

impl VelocityModel for Denoiser {
    fn latent_shape(&self) -> (usize, usize) {
        (self.config.latent_tokens, self.config.dim)
    }
    fn velocity(
        &self,
        z_t: &Array2<f64>,
        t: usize,
        condition: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        self.denoise(z_t, t, condition)
    }
}

/// Deterministic sampler. Starts from seeded standard-normal Z_T and walks a
/// uniformly strided timestep subsequence t_i = round(T·(s−i)/s); each step
/// recovers (Ẑ_0, ε̂) from the predicted velocity and re-noises to the next
/// level with no added variance; the final step lands on ᾱ = 1 (clean).
/// One-step sampling requires a zero-terminal schedule (Z_T is then pure
/// noise, matching the sampler's starting point).
pub fn sample(
    model: &dyn VelocityModel,
    schedule: &DiffusionSchedule,
    condition: &Array2<f64>,
    steps: usize,
    seed: u64,
) -> Result<LatentSeq> {
    let t_max = schedule.t_steps;
    if steps < 1 || steps > t_max {
        return Err(LabError::InvalidArgument(format!(
            "steps {steps} outside 1..={t_max}"
        )));
    }
    if steps == 1 && !schedule.zero_terminal {
        return Err(LabError::InvalidArgument(
            "one-step sampling needs a zero-terminal schedule".into(),
        ));
    }
    let (n_z, d_z) = model.latent_shape();
    let mut rng = substream(seed, 0x7361_6d70);
    let mut z = normal2(&mut rng, n_z, d_z, 1.0);

    let stride_t = |i: usize| -> usize {
        ((t_max as f64) * (steps - i) as f64 / steps as f64).round() as usize
    };
    for i in 0..steps {
        let t = stride_t(i).max(1);
        let v_hat = model.velocity(&z, t, condition)?;
        let z0_hat = recover_z0(schedule, &z, &v_hat, t)?;
        let eps_hat = recover_eps(schedule, &z, &v_hat, t)?;
        let t_next = if i + 1 < steps { stride_t(i + 1) } else { 0 };
        let sa = schedule.sqrt_alpha_bar(t_next)?;
        let so = schedule.sqrt_one_minus_alpha_bar(t_next)?;
        z = z0_hat.mapv(|v| sa * v) + eps_hat.mapv(|v| so * v);
    }
    Ok(LatentSeq { z })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DenoiserTrainOpts {
    pub epochs: usize,
    pub lr: f64,
    /// Decoupled weight decay (AdamW); 0 disables it.
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Probability of augmenting a clip (and its condition rows) per draw.
    pub augment_prob: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DenoiserEpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub v_term: f64,
    pub eps_term: f64,
}

/// Train the denoiser against a frozen VAE. `conditions[i]` holds the
/// per-frame feature rows (F × D_F) for `clips[i]`, produced by a frozen
/// feature extractor. Per draw: Z_0 = posterior mean of the (possibly
/// augmented) clip, t ~ U[1, T], ε ~ N(0, I), hybrid loss, AdamW step.
/// Augmentations are applied jointly to the clip and its condition rows.
pub fn train_denoiser(
    denoiser: &mut Denoiser,
    vae: &MotionVae,
    schedule: &DiffusionSchedule,
    clips: &[MotionClip],
    conditions: &[Array2<f64>],
    opts: &DenoiserTrainOpts,
) -> Result<Vec<DenoiserEpochLoss>> {
    denoiser.validate()?;
    vae.validate()?;
    schedule.validate()?;
    if clips.is_empty() {
        return Err(LabError::Empty("train_denoiser clips"));
    }
    if clips.len() != conditions.len() {
        return shape_err("train_denoiser conditions", clips.len(), conditions.len());
    }
    if opts.epochs == 0 || opts.batch == 0 || !(opts.lr > 0.0) {
        return Err(LabError::InvalidArgument(
            "train_denoiser needs epochs ≥ 1, batch ≥ 1, lr > 0".into(),
        ));
    }
    if !(0.0..=1.0).contains(&opts.augment_prob) {
        return Err(LabError::InvalidArgument("augment_prob outside [0,1]".into()));
    }
    let cfg = denoiser.config;
    for (i, (c, f)) in clips.iter().zip(conditions).enumerate() {
        if c.frames.len() != cfg.cond_frames || f.dim() != (cfg.cond_frames, cfg.cond_dim) {
            return shape_err(
                "train_denoiser clip/condition shapes",
                format!("{} frames, ({}, {})", cfg.cond_frames, cfg.cond_frames, cfg.cond_dim),
                format!("clip {i}: {} frames, {:?}", c.frames.len(), f.dim()),
            );
        }
    }
    if vae.config.frames != cfg.cond_frames
        || vae.config.latent_tokens != cfg.latent_tokens
        || vae.config.latent_dim != cfg.dim
    {
        return shape_err(
            "train_denoiser vae",
            format!(
                "frames {}, latents {}×{}",
                cfg.cond_frames, cfg.latent_tokens, cfg.dim
            ),
            format!(
                "frames {}, latents {}×{}",
                vae.config.frames, vae.config.latent_tokens, vae.config.latent_dim
            ),
        );
    }

    let mut adam = Adam::new(
        AdamConfig::with_weight_decay(opts.lr, opts.weight_decay),
        denoiser.params.len(),
    );
    let mut rng = substream(opts.seed, 0x6474_7261);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut grad = vec![0.0; denoiser.params.len()];
    let mut curve = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let (mut ep_total, mut ep_v, mut ep_e) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(opts.batch) {
            grad.iter_mut().for_each(|v| *v = 0.0);
            for &ci in chunk {
                let aug = Augmentation::draw(
                    cfg.cond_frames,
                    opts.augment_prob,
                    opts.augment_prob,
                    &mut rng,
                );
                let (z0, cond) = if aug.is_identity() {
                    (vae.encode(&clips[ci])?.mean, conditions[ci].clone())
                } else {
                    let clip = aug.apply_clip(&clips[ci])?;
                    let cond = aug.apply_rows(&conditions[ci]);
                    (vae.encode(&clip)?.mean, cond)
                };
                let t = rng.gen_range(1..=schedule.t_steps);
                let eps = normal2(&mut rng, cfg.latent_tokens, cfg.dim, 1.0);
                let use_dropout = cfg.dropout > 0.0;
                let (total, v_term, eps_term) = denoiser.loss_and_grad(
                    schedule,
                    &z0,
                    &cond,
                    t,
                    &eps,
                    opts.lambda1,
                    opts.lambda2,
                    if use_dropout { Some(&mut rng) } else { None },
                    &mut grad,
                )?;
                if !total.is_finite() {
                    return Err(LabError::Diverged { epoch, loss: total });
                }
                ep_total += total;
                ep_v += v_term;
                ep_e += eps_term;
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|v| *v *= scale);
            adam.step(denoiser.params.as_slice_mut().unwrap(), &grad);
        }
        let n = clips.len() as f64;
        let rec = DenoiserEpochLoss {
            epoch,
            total: ep_total / n,
            v_term: ep_v / n,
            eps_term: ep_e / n,
        };
        if !rec.total.is_finite() {
            return Err(LabError::Diverged { epoch, loss: rec.total });
        }
        curve.push(rec);
    }
    Ok(curve)
}
