//! Dense-layer primitives with hand-written backward passes. Everything works
//! on `f64` ndarrays; parameters live in flat vectors sliced through `Range`s.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

pub const LN_EPS: f64 = 1e-5;

/// Sequential allocator for laying out named segments in a flat parameter vector.
pub struct Cursor(pub usize);

impl Cursor {
    pub fn new() -> Self {
        Cursor(0)
    }
    pub fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
    pub fn len(&self) -> usize {
        self.0
    }
}

impl Default for Cursor {
    fn default() -> Self {
        Self::new()
    }
}

pub fn view1<'a>(p: &'a [f64], r: &Range<usize>) -> ArrayView1<'a, f64> {
    ArrayView1::from(&p[r.clone()])
}

pub fn view2<'a>(p: &'a [f64], r: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &p[r.clone()]).expect("segment length = rows*cols")
}

/// Accumulate a gradient contribution into a flat segment.
pub fn accum1(g: &mut [f64], r: &Range<usize>, contrib: &Array1<f64>) {
    for (dst, src) in g[r.clone()].iter_mut().zip(contrib.iter()) {
        *dst += src;
    }
}

pub fn accum2(g: &mut [f64], r: &Range<usize>, contrib: &Array2<f64>) {
    for (dst, src) in g[r.clone()].iter_mut().zip(contrib.iter()) {
        *dst += src;
    }
}

/// y = x·W + b, rows are examples/tokens.
pub fn linear(x: &Array2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns (dx, dw, db) for y = x·W + b given dL/dy.
pub fn linear_bwd(
    x: &Array2<f64>,
    w: &ArrayView2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

/// Row-wise layer norm: y = gain ⊙ (x − μ)/σ + bias.
pub fn layernorm(
    x: &Array2<f64>,
    gain: &ArrayView1<f64>,
    bias: &ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    for (mut row, &r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter()) {
        row.mapv_inplace(|v| v * r);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, rstd })
}

/// Returns (dx, dgain, dbias).
pub fn layernorm_bwd(
    cache: &LnCache,
    gain: &ArrayView1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    // dx = rstd · (dxhat − mean(dxhat) − xhat · mean(dxhat ⊙ xhat)), per row.
    let m1 = dxhat.mean_axis(Axis(1)).expect("non-empty rows");
    let m2 = (&dxhat * &cache.xhat)
        .mean_axis(Axis(1))
        .expect("non-empty rows");
    let mut dx = dxhat;
    for ((mut row, xh_row), (m1v, (m2v, rs))) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(m1.iter().zip(m2.iter().zip(cache.rstd.iter())))
    {
        for (v, xh) in row.iter_mut().zip(xh_row.iter()) {
            *v = rs * (*v - m1v - xh * m2v);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = x.clone();
    dx.zip_mut_with(dy, |v, &g| {
        let u = GELU_C * (*v + GELU_A * *v * *v * *v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * *v * *v);
        *v = g * (0.5 * (1.0 + t) + 0.5 * *v * (1.0 - t * t) * du);
    });
    dx
}

/// Inverted dropout; `None` rng or p = 0 is a pass-through. Mask carries the
/// 1/(1−p) scale so backward is a plain elementwise product.
pub fn dropout(
    x: &Array2<f64>,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    match rng {
        Some(r) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = x.mapv(|_| if r.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
            (x * &mask, Some(mask))
        }
        _ => (x.clone(), None),
    }
}

pub fn dropout_bwd(mask: &Option<Array2<f64>>, dy: &Array2<f64>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

/// Backward through row-wise softmax: dx = p ⊙ dy − p · rowsum(p ⊙ dy).
pub fn softmax_rows_bwd(probs: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let dot = (dy * probs).sum_axis(Axis(1));
    let mut dx = dy * probs;
    for ((mut row, p_row), &s) in dx
        .axis_iter_mut(Axis(0))
        .zip(probs.axis_iter(Axis(0)))
        .zip(dot.iter())
    {
        for (v, p) in row.iter_mut().zip(p_row.iter()) {
            *v -= p * s;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal2, seeded};

    fn num_grad(f: &mut dyn FnMut(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / (1.0 + x.abs().max(y.abs())))
            .fold(0.0, f64::max)
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = seeded(1);
        let x = normal2(&mut rng, 3, 4, 1.0);
        let w_owned = normal2(&mut rng, 4, 5, 1.0);
        let b_owned = crate::rng::normal1(&mut rng, 5, 1.0);
        let r = normal2(&mut rng, 3, 5, 1.0); // random projection makes loss scalar
        let w = w_owned.view();
        let b = b_owned.view();

        let loss = |x: &Array2<f64>| (linear(x, &w, &b) * &r).sum();
        let dy = r.clone();
        let (dx, dw, db) = linear_bwd(&x, &w, &dy);
        let gx = num_grad(&mut { |x: &Array2<f64>| loss(x) }, &x);
        assert!(max_rel(&dx, &gx) < 1e-7, "dx rel err {}", max_rel(&dx, &gx));

        // weight grad against finite differences on W
        let h = 1e-5;
        let mut gw = Array2::zeros(w_owned.raw_dim());
        for i in 0..4 {
            for j in 0..5 {
                let mut wp = w_owned.clone();
                wp[[i, j]] += h;
                let mut wm = w_owned.clone();
                wm[[i, j]] -= h;
                gw[[i, j]] =
                    ((linear(&x, &wp.view(), &b) * &r).sum() - (linear(&x, &wm.view(), &b) * &r).sum()) / (2.0 * h);
            }
        }
        assert!(max_rel(&dw, &gw) < 1e-7);
        let db_num: Vec<f64> = (0..5)
            .map(|j| {
                let mut bp = b_owned.clone();
                bp[j] += h;
                let mut bm = b_owned.clone();
                bm[j] -= h;
                ((linear(&x, &w, &bp.view()) * &r).sum() - (linear(&x, &w, &bm.view()) * &r).sum()) / (2.0 * h)
            })
            .collect();
        for (a, b) in db.iter().zip(db_num.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_matches_finite_differences() {
        let mut rng = seeded(2);
        let x = normal2(&mut rng, 4, 6, 1.5);
        let g_owned = crate::rng::normal1(&mut rng, 6, 1.0);
        let b_owned = crate::rng::normal1(&mut rng, 6, 1.0);
        let r = normal2(&mut rng, 4, 6, 1.0);
        let gain = g_owned.view();
        let bias = b_owned.view();

        let (_, cache) = layernorm(&x, &gain, &bias);
        let (dx, dgain, dbias) = layernorm_bwd(&cache, &gain, &r);

        let mut f = |x: &Array2<f64>| (layernorm(x, &gain, &bias).0 * &r).sum();
        let gx = num_grad(&mut f, &x);
        assert!(max_rel(&dx, &gx) < 1e-6, "dx rel err {}", max_rel(&dx, &gx));

        let h = 1e-5;
        for j in 0..6 {
            let mut gp = g_owned.clone();
            gp[j] += h;
            let mut gm = g_owned.clone();
            gm[j] -= h;
            let num = ((layernorm(&x, &gp.view(), &bias).0 * &r).sum()
                - (layernorm(&x, &gm.view(), &bias).0 * &r).sum())
                / (2.0 * h);
            assert!((dgain[j] - num).abs() < 1e-6);

            let mut bp = b_owned.clone();
            bp[j] += h;
            let mut bm = b_owned.clone();
            bm[j] -= h;
            let numb = ((layernorm(&x, &gain, &bp.view()).0 * &r).sum()
                - (layernorm(&x, &gain, &bm.view()).0 * &r).sum())
                / (2.0 * h);
            assert!((dbias[j] - numb).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_matches_finite_differences() {
        let mut rng = seeded(3);
        let x = normal2(&mut rng, 5, 3, 2.0);
        let r = normal2(&mut rng, 5, 3, 1.0);
        let dx = gelu_bwd(&x, &r);
        let mut f = |x: &Array2<f64>| (gelu(x) * &r).sum();
        let gx = num_grad(&mut f, &x);
        assert!(max_rel(&dx, &gx) < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_bwd_checks() {
        let mut rng = seeded(4);
        let x = normal2(&mut rng, 4, 7, 3.0);
        let p = softmax_rows(&x);
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let r = normal2(&mut rng, 4, 7, 1.0);
        let dx = softmax_rows_bwd(&p, &r);
        let mut f = |x: &Array2<f64>| (softmax_rows(x) * &r).sum();
        let gx = num_grad(&mut f, &x);
        assert!(max_rel(&dx, &gx) < 1e-6);
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let x = Array2::from_elem((10, 10), 1.0);
        let (y, mask) = dropout(&x, 0.4, Some(&mut seeded(5)));
        let mask = mask.unwrap();
        for (&v, &m) in y.iter().zip(mask.iter()) {
            assert!(v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12);
            assert_eq!(v, m);
        }
        let (y2, m2) = dropout(&x, 0.0, Some(&mut seeded(5)));
        assert!(m2.is_none());
        assert_eq!(y2, x);
    }
}
