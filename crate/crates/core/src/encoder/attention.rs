//! Multi-head attention with optional cyclic rotation of queries/keys and
//! per-head additive logit bias, plus its analytic backward pass.

use crate::cfee::cyclic_rotate_rows;
use crate::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl AttnParams {
    pub fn zeros(d: usize) -> Self {
        AttnParams {
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
        }
    }
}

/// Timestamps used to rotate query and key rows.
#[derive(Debug, Clone, Copy)]
pub struct Rotation<'a> {
    pub q_ts: &'a [i64],
    pub k_ts: &'a [i64],
    pub periods: &'a [i64],
}

#[derive(Debug, Clone, Copy)]
pub struct AttnSpec<'a> {
    pub n_heads: usize,
    pub rotation: Option<Rotation<'a>>,
    /// One `Lq × Lk` matrix per head, added to the scaled logits.
    pub bias: Option<&'a [Mat]>,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    q_in: Mat,
    kv_in: Mat,
    /// Post-rotation.
    q: Mat,
    k: Mat,
    v: Mat,
    pub probs: Vec<Mat>,
    concat: Mat,
}

pub struct AttnGrads {
    pub dq_in: Mat,
    pub dkv_in: Mat,
    /// Gradient of the pre-softmax logits per head (equals the bias gradient).
    pub dlogits: Vec<Mat>,
}

pub fn attention_forward(p: &AttnParams, q_in: &Mat, kv_in: &Mat, spec: &AttnSpec) -> (Mat, AttnCache) {
    let d = p.wq.cols;
    let dh = d / spec.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut q = matmul(q_in, &p.wq);
    let mut k = matmul(kv_in, &p.wk);
    let v = matmul(kv_in, &p.wv);
    if let Some(rot) = spec.rotation {
        cyclic_rotate_rows(&mut q, rot.q_ts, rot.periods, false);
        cyclic_rotate_rows(&mut k, rot.k_ts, rot.periods, false);
    }
    let mut concat = Mat::zeros(q_in.rows, d);
    let mut probs = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let qh = q.col_slice(h * dh, dh);
        let kh = k.col_slice(h * dh, dh);
        let vh = v.col_slice(h * dh, dh);
        let mut logits = matmul_nt(&qh, &kh);
        logits.scale_assign(scale);
        if let Some(bias) = spec.bias {
            logits.add_assign(&bias[h]);
        }
        softmax_rows(&mut logits);
        concat.add_col_slice(h * dh, &matmul(&logits, &vh));
        probs.push(logits);
    }
    let out = matmul(&concat, &p.wo);
    (
        out,
        AttnCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Accumulates weight gradients into `g` and returns input/logit gradients.
pub fn attention_backward(
    p: &AttnParams,
    cache: &AttnCache,
    spec: &AttnSpec,
    dout: &Mat,
    g: &mut AttnParams,
) -> AttnGrads {
    let d = p.wq.cols;
    let dh = d / spec.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    g.wo.add_assign(&matmul_tn(&cache.concat, dout));
    let dconcat = matmul_nt(dout, &p.wo);

    let mut dq = Mat::zeros(cache.q.rows, d);
    let mut dk = Mat::zeros(cache.k.rows, d);
    let mut dv = Mat::zeros(cache.v.rows, d);
    let mut dlogits = Vec::with_capacity(spec.n_heads);
    for h in 0..spec.n_heads {
        let qh = cache.q.col_slice(h * dh, dh);
        let kh = cache.k.col_slice(h * dh, dh);
        let vh = cache.v.col_slice(h * dh, dh);
        let doh = dconcat.col_slice(h * dh, dh);
        let probs = &cache.probs[h];
        let dprobs = matmul_nt(&doh, &vh);
        dv.add_col_slice(h * dh, &matmul_tn(probs, &doh));
        let dlog = softmax_rows_backward(probs, &dprobs);
        let mut dqh = matmul(&dlog, &kh);
        dqh.scale_assign(scale);
        let mut dkh = matmul_tn(&dlog, &qh);
        dkh.scale_assign(scale);
        dq.add_col_slice(h * dh, &dqh);
        dk.add_col_slice(h * dh, &dkh);
        dlogits.push(dlog);
    }
    if let Some(rot) = spec.rotation {
        cyclic_rotate_rows(&mut dq, rot.q_ts, rot.periods, true);
        cyclic_rotate_rows(&mut dk, rot.k_ts, rot.periods, true);
    }
    g.wq.add_assign(&matmul_tn(&cache.q_in, &dq));
    g.wk.add_assign(&matmul_tn(&cache.kv_in, &dk));
    g.wv.add_assign(&matmul_tn(&cache.kv_in, &dv));
    let dq_in = matmul_nt(&dq, &p.wq);
    let mut dkv_in = matmul_nt(&dk, &p.wk);
    dkv_in.add_assign(&matmul_nt(&dv, &p.wv));
    AttnGrads {
        dq_in,
        dkv_in,
        dlogits,
    }
}
