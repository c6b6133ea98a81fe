//! Multi-head self-attention over token rows, forward and backward.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use super::ops::{linear, linear_bwd, softmax_rows, softmax_rows_bwd};

/// Views into one attention block's parameters (all D×D projections).
pub struct MhaParams<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
}

pub struct MhaCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax probabilities per head, each n×n.
    pub probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub att: Array2<f64>,
}

pub struct MhaGrads {
    pub dwq: Array2<f64>,
    pub dbq: Array1<f64>,
    pub dwk: Array2<f64>,
    pub dbk: Array1<f64>,
    pub dwv: Array2<f64>,
    pub dbv: Array1<f64>,
    pub dwo: Array2<f64>,
    pub dbo: Array1<f64>,
}

pub fn mha(x: &Array2<f64>, p: &MhaParams, heads: usize) -> (Array2<f64>, MhaCache) {
    let (n, d) = x.dim();
    debug_assert_eq!(d % heads, 0);
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);

    let mut att = Array2::<f64>::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let ph = softmax_rows(&scores);
        let oh = ph.dot(&vh);
        att.slice_mut(cols).assign(&oh);
        probs.push(ph);
    }
    let y = linear(&att, &p.wo, &p.bo);
    (y, MhaCache { q, k, v, probs, att })
}

pub fn mha_bwd(
    x: &Array2<f64>,
    p: &MhaParams,
    heads: usize,
    cache: &MhaCache,
    dy: &Array2<f64>,
) -> (Array2<f64>, MhaGrads) {
    let (n, d) = x.dim();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let (datt, dwo, dbo) = linear_bwd(&cache.att, &p.wo, dy);

    let mut dq = Array2::<f64>::zeros((n, d));
    let mut dk = Array2::<f64>::zeros((n, d));
    let mut dv = Array2::<f64>::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let ph = &cache.probs[h];
        let doh = datt.slice(cols).to_owned();

        let dph = doh.dot(&vh.t());
        let dvh = ph.t().dot(&doh);
        let dscores = softmax_rows_bwd(ph, &dph) * scale;
        let dqh = dscores.dot(&kh);
        let dkh = dscores.t().dot(&qh);

        dq.slice_mut(cols).assign(&dqh);
        dk.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&dvh);
    }

    let (dx_q, dwq, dbq) = linear_bwd(x, &p.wq, &dq);
    let (dx_k, dwk, dbk) = linear_bwd(x, &p.wk, &dk);
    let (dx_v, dwv, dbv) = linear_bwd(x, &p.wv, &dv);
    let dx = dx_q + dx_k + dx_v;

    (
        dx,
        MhaGrads {
            dwq,
            dbq,
            dwk,
            dbk,
            dwv,
            dbv,
            dwo,
            dbo,
        },
    )
}
