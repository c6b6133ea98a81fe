//! Pre-norm transformer layers over a flat parameter buffer, plus a stack
//! runner with optional U-shaped long skip connections (layer i's output is
//! concatenated into layer L−1−i's input through a learned projection).
//!
//! Flat layer layout, in order: ln1 gain/bias, Wq bq, Wk bk, Wv bv, Wo bo,
//! ln2 gain/bias, W1 b1, W2 b2. All weight matrices are row-major with input
//! dimension first (y = x·W + b). A layer whose Wo/bo and W2/b2 are zero is an
//! exact identity on the token stream, because both residual branches add zero.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

use super::attention::{mha, mha_bwd, MhaCache, MhaParams};
use super::ops::{
    accum1, accum2, dropout, dropout_bwd, gelu, gelu_bwd, layernorm, layernorm_bwd, linear,
    linear_bwd, view1, view2, Cursor, LnCache,
};
use crate::rng::normal2;

/// Offsets of every parameter block inside one layer's flat vector.
#[derive(Clone, Debug)]
pub struct LayerLayout {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub len: usize,
}

impl LayerLayout {
    pub fn new(d: usize, heads: usize, ff: usize) -> Self {
        let mut c = Cursor::new();
        let ln1_g = c.take(d);
        let ln1_b = c.take(d);
        let wq = c.take(d * d);
        let bq = c.take(d);
        let wk = c.take(d * d);
        let bk = c.take(d);
        let wv = c.take(d * d);
        let bv = c.take(d);
        let wo = c.take(d * d);
        let bo = c.take(d);
        let ln2_g = c.take(d);
        let ln2_b = c.take(d);
        let w1 = c.take(d * ff);
        let b1 = c.take(ff);
        let w2 = c.take(ff * d);
        let b2 = c.take(d);
        LayerLayout {
            d,
            heads,
            ff,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
            len: c.len(),
        }
    }

    fn attn_views<'a>(&self, p: &'a [f64]) -> MhaParams<'a> {
        let d = self.d;
        MhaParams {
            wq: view2(p, &self.wq, d, d),
            bq: view1(p, &self.bq),
            wk: view2(p, &self.wk, d, d),
            bk: view1(p, &self.bk),
            wv: view2(p, &self.wv, d, d),
            bv: view1(p, &self.bv),
            wo: view2(p, &self.wo, d, d),
            bo: view1(p, &self.bo),
        }
    }
}

pub struct LayerCache {
    ln1: LnCache,
    xn1: Array2<f64>,
    attn: MhaCache,
    ln2: LnCache,
    an: Array2<f64>,
    h_pre: Array2<f64>,
    h_drop: Array2<f64>,
    drop_mask: Option<Array2<f64>>,
}

/// One pre-norm block: x + attn(ln1(x)), then + mlp(ln2(·)).
pub fn layer_fwd(
    ll: &LayerLayout,
    p: &[f64],
    x: &Array2<f64>,
    drop_p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    debug_assert_eq!(p.len(), ll.len);
    let (xn1, ln1) = layernorm(x, &view1(p, &ll.ln1_g), &view1(p, &ll.ln1_b));
    let (attn_y, attn) = mha(&xn1, &ll.attn_views(p), ll.heads);
    let a = x + &attn_y;

    let (an, ln2) = layernorm(&a, &view1(p, &ll.ln2_g), &view1(p, &ll.ln2_b));
    let h_pre = linear(&an, &view2(p, &ll.w1, ll.d, ll.ff), &view1(p, &ll.b1));
    let h_act = gelu(&h_pre);
    let (h_drop, drop_mask) = dropout(&h_act, drop_p, rng);
    let m = linear(&h_drop, &view2(p, &ll.w2, ll.ff, ll.d), &view1(p, &ll.b2));
    let y = a + m;

    (
        y,
        LayerCache {
            ln1,
            xn1,
            attn,
            ln2,
            an,
            h_pre,
            h_drop,
            drop_mask,
        },
    )
}

/// Inference-only forward (no cache kept alive by the caller).
pub fn layer_infer(ll: &LayerLayout, p: &[f64], x: &Array2<f64>) -> Array2<f64> {
    layer_fwd(ll, p, x, 0.0, None).0
}

/// Backward; accumulates parameter grads into `g` (same layout as `p`), returns dx.
pub fn layer_bwd(
    ll: &LayerLayout,
    p: &[f64],
    cache: &LayerCache,
    dy: &Array2<f64>,
    g: &mut [f64],
) -> Array2<f64> {
    // y = a + mlp
    let (dh_drop, dw2, db2) = linear_bwd(&cache.h_drop, &view2(p, &ll.w2, ll.ff, ll.d), dy);
    accum2(g, &ll.w2, &dw2);
    accum1(g, &ll.b2, &db2);
    let dh_act = dropout_bwd(&cache.drop_mask, &dh_drop);
    let dh_pre = gelu_bwd(&cache.h_pre, &dh_act);
    let (dan, dw1, db1) = linear_bwd(&cache.an, &view2(p, &ll.w1, ll.d, ll.ff), &dh_pre);
    accum2(g, &ll.w1, &dw1);
    accum1(g, &ll.b1, &db1);
    let (da_mlp, dg2, db_ln2) = layernorm_bwd(&cache.ln2, &view1(p, &ll.ln2_g), &dan);
    accum1(g, &ll.ln2_g, &dg2);
    accum1(g, &ll.ln2_b, &db_ln2);
    let da = dy + &da_mlp;

    // a = x + attn
    let (dxn1, ag) = mha_bwd(&cache.xn1, &ll.attn_views(p), ll.heads, &cache.attn, &da);
    accum2(g, &ll.wq, &ag.dwq);
    accum1(g, &ll.bq, &ag.dbq);
    accum2(g, &ll.wk, &ag.dwk);
    accum1(g, &ll.bk, &ag.dbk);
    accum2(g, &ll.wv, &ag.dwv);
    accum1(g, &ll.bv, &ag.dbv);
    accum2(g, &ll.wo, &ag.dwo);
    accum1(g, &ll.bo, &ag.dbo);
    let (dx_ln1, dg1, db_ln1) = layernorm_bwd(&cache.ln1, &view1(p, &ll.ln1_g), &dxn1);
    accum1(g, &ll.ln1_g, &dg1);
    accum1(g, &ll.ln1_b, &db_ln1);

    da + dx_ln1
}

/// Default random init for a trainable layer. Output projections are shrunk by
/// 1/√(2L) so deep residual streams start close to identity.
pub fn init_layer(ll: &LayerLayout, total_layers: usize, rng: &mut ChaCha8Rng, p: &mut [f64]) {
    let d = ll.d;
    let ff = ll.ff;
    let base = 1.0 / (d as f64).sqrt();
    let out_scale = base / (2.0 * total_layers as f64).sqrt();
    p[ll.ln1_g.clone()].fill(1.0);
    p[ll.ln2_g.clone()].fill(1.0);
    for (range, rows, cols, std) in [
        (&ll.wq, d, d, base),
        (&ll.wk, d, d, base),
        (&ll.wv, d, d, base),
        (&ll.wo, d, d, out_scale),
        (&ll.w1, d, ff, base),
        (&ll.w2, ff, d, out_scale),
    ] {
        let w = normal2(rng, rows, cols, std);
        p[range.clone()].copy_from_slice(w.as_slice().unwrap());
    }
    // biases and ln offsets stay zero
}

#[derive(Clone, Copy, Debug)]
pub struct StackConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff: usize,
    pub dropout: f64,
    pub long_skip: bool,
}

impl StackConfig {
    pub fn layer_layout(&self) -> LayerLayout {
        LayerLayout::new(self.dim, self.heads, self.ff)
    }
    pub fn n_skips(&self) -> usize {
        if self.long_skip {
            self.layers / 2
        } else {
            0
        }
    }
    fn skip_len(&self) -> usize {
        2 * self.dim * self.dim + self.dim
    }
    pub fn param_len(&self) -> usize {
        self.layers * self.layer_layout().len + self.n_skips() * self.skip_len()
    }
    fn layer_range(&self, j: usize) -> Range<usize> {
        let len = self.layer_layout().len;
        j * len..(j + 1) * len
    }
    /// (W, b) ranges for skip projection i (source layer i → target L−1−i).
    fn skip_range(&self, i: usize) -> (Range<usize>, Range<usize>) {
        let base = self.layers * self.layer_layout().len + i * self.skip_len();
        let wlen = 2 * self.dim * self.dim;
        (base..base + wlen, base + wlen..base + wlen + self.dim)
    }
}

pub struct StackCache {
    layers: Vec<LayerCache>,
    /// Concatenated [current, skip-source] inputs at each skip target.
    skip_cats: Vec<Array2<f64>>,
}

pub fn init_stack(cfg: &StackConfig, rng: &mut ChaCha8Rng, p: &mut [f64]) {
    assert_eq!(p.len(), cfg.param_len());
    let ll = cfg.layer_layout();
    for j in 0..cfg.layers {
        init_layer(&ll, cfg.layers, rng, &mut p[cfg.layer_range(j)]);
    }
    // skip projections start as pass-through of the current stream: W = [I; 0] + noise
    let d = cfg.dim;
    for i in 0..cfg.n_skips() {
        let (wr, _br) = cfg.skip_range(i);
        let noise = normal2(rng, 2 * d, d, 0.02);
        let w = &mut p[wr];
        w.copy_from_slice(noise.as_slice().unwrap());
        for k in 0..d {
            w[k * d + k] += 1.0;
        }
    }
}

pub fn stack_fwd(
    cfg: &StackConfig,
    p: &[f64],
    x: &Array2<f64>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, StackCache) {
    let ll = cfg.layer_layout();
    let n_skip = cfg.n_skips();
    let mut outs: Vec<Array2<f64>> = Vec::with_capacity(n_skip);
    let mut caches = Vec::with_capacity(cfg.layers);
    let mut skip_cats = Vec::new();
    let mut cur = x.clone();

    for j in 0..cfg.layers {
        if n_skip > 0 && j >= cfg.layers - n_skip {
            let i = cfg.layers - 1 - j;
            let cat = concatenate(Axis(1), &[cur.view(), outs[i].view()]).expect("same row count");
            let (wr, br) = cfg.skip_range(i);
            cur = linear(
                &cat,
                &view2(p, &wr, 2 * cfg.dim, cfg.dim),
                &view1(p, &br),
            );
            skip_cats.push(cat);
        }
        let (y, cache) = layer_fwd(
            &ll,
            &p[cfg.layer_range(j)],
            &cur,
            cfg.dropout,
            rng.as_deref_mut(),
        );
        cur = y;
        caches.push(cache);
        if j < n_skip {
            outs.push(cur.clone());
        }
    }
    (
        cur,
        StackCache {
            layers: caches,
            skip_cats,
        },
    )
}

/// Backward; accumulates into `g` (layout = stack params), returns dx.
pub fn stack_bwd(
    cfg: &StackConfig,
    p: &[f64],
    cache: &StackCache,
    dy: &Array2<f64>,
    g: &mut [f64],
) -> Array2<f64> {
    let ll = cfg.layer_layout();
    let n_skip = cfg.n_skips();
    let d = cfg.dim;
    let mut d_outs: Vec<Option<Array2<f64>>> = vec![None; n_skip];
    let mut dcur = dy.clone();

    for j in (0..cfg.layers).rev() {
        if j < n_skip {
            // this layer's output also fed a skip concat; its grad arrived earlier
            if let Some(extra) = d_outs[j].take() {
                dcur = dcur + extra;
            }
        }
        let lr = cfg.layer_range(j);
        let mut dx = {
            let (ps, gs) = (&p[lr.clone()], &mut g[lr]);
            layer_bwd(&ll, ps, &cache.layers[j], &dcur, gs)
        };
        if n_skip > 0 && j >= cfg.layers - n_skip {
            let i = cfg.layers - 1 - j;
            let cat_idx = j - (cfg.layers - n_skip);
            let cat = &cache.skip_cats[cat_idx];
            let (wr, br) = cfg.skip_range(i);
            let (dcat, dw, db) = linear_bwd(cat, &view2(p, &wr, 2 * d, d), &dx);
            accum2(g, &wr, &dw);
            accum1(g, &br, &db);
            dx = dcat.slice(s![.., 0..d]).to_owned();
            let skip_part = dcat.slice(s![.., d..2 * d]).to_owned();
            d_outs[i] = Some(match d_outs[i].take() {
                Some(acc) => acc + skip_part,
                None => skip_part,
            });
        }
        dcur = dx;
    }
    dcur
}

/// Convenience init helper used by networks that own a flat buffer.
pub fn alloc_stack(cfg: &StackConfig, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut p = Array1::zeros(cfg.param_len());
    init_stack(cfg, rng, p.as_slice_mut().unwrap());
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal2, seeded};

    fn check_stack_grads(long_skip: bool, layers: usize, dropout: f64) {
        let cfg = StackConfig {
            layers,
            dim: 4,
            heads: 2,
            ff: 6,
            dropout,
            long_skip,
        };
        let mut rng = seeded(31);
        let p = alloc_stack(&cfg, &mut rng);
        let ps = p.as_slice().unwrap();
        let x = normal2(&mut rng, 3, 4, 1.0);
        let r = normal2(&mut rng, 3, 4, 1.0);

        // dropout > 0 needs the same mask for analytic and numeric runs; test with 0 only
        let (_, cache) = stack_fwd(&cfg, ps, &x, None);
        let mut g = vec![0.0; cfg.param_len()];
        let dx = stack_bwd(&cfg, ps, &cache, &r, &mut g);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let up = (stack_fwd(&cfg, ps, &xp, None).0 * &r).sum();
                let down = (stack_fwd(&cfg, ps, &xm, None).0 * &r).sum();
                worst = worst.max((dx[[i, j]] - (up - down) / (2.0 * h)).abs());
            }
        }
        assert!(worst < 1e-5, "input grad worst {worst}");

        // spot-check parameter grads across the whole flat vector
        let mut pv = p.to_vec();
        let stride = (cfg.param_len() / 97).max(1);
        let mut checked = 0;
        for idx in (0..cfg.param_len()).step_by(stride) {
            let orig = pv[idx];
            pv[idx] = orig + h;
            let up = (stack_fwd(&cfg, &pv, &x, None).0 * &r).sum();
            pv[idx] = orig - h;
            let down = (stack_fwd(&cfg, &pv, &x, None).0 * &r).sum();
            pv[idx] = orig;
            let num = (up - down) / (2.0 * h);
            assert!(
                (g[idx] - num).abs() < 1e-5,
                "param {idx} analytic {} numeric {num}",
                g[idx]
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn plain_stack_gradients() {
        check_stack_grads(false, 2, 0.0);
    }

    #[test]
    fn skip_stack_gradients_odd_depth() {
        check_stack_grads(true, 5, 0.0);
    }

    #[test]
    fn skip_stack_gradients_even_depth() {
        check_stack_grads(true, 4, 0.0);
    }

    #[test]
    fn zero_output_projections_make_identity_layer() {
        let ll = LayerLayout::new(8, 2, 16);
        let mut p = vec![0.0; ll.len];
        let mut rng = seeded(9);
        init_layer(&ll, 1, &mut rng, &mut p);
        p[ll.wo.clone()].fill(0.0);
        p[ll.bo.clone()].fill(0.0);
        p[ll.w2.clone()].fill(0.0);
        p[ll.b2.clone()].fill(0.0);
        let x = normal2(&mut rng, 5, 8, 1.0);
        let y = layer_infer(&ll, &p, &x);
        let diff = (&y - &x).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn all_zero_layer_is_identity() {
        let ll = LayerLayout::new(6, 2, 12);
        let p = vec![0.0; ll.len];
        let x = normal2(&mut seeded(10), 4, 6, 1.0);
        let y = layer_infer(&ll, &p, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_zero_matches_no_rng() {
        let cfg = StackConfig {
            layers: 2,
            dim: 4,
            heads: 2,
            ff: 8,
            dropout: 0.0,
            long_skip: false,
        };
        let mut rng = seeded(12);
        let p = alloc_stack(&cfg, &mut rng);
        let x = normal2(&mut rng, 3, 4, 1.0);
        let a = stack_fwd(&cfg, p.as_slice().unwrap(), &x, Some(&mut seeded(1))).0;
        let b = stack_fwd(&cfg, p.as_slice().unwrap(), &x, None).0;
        assert_eq!(a, b);
    }
}
