//! Forward passes with caches, and the matching analytic backward passes.
//!
//! Every sequence is processed on its own; nothing here ever looks at another
//! user's data, so batch composition cannot change any output bit.

use super::attention::{attention_backward, attention_forward, AttnCache, AttnParams, AttnSpec, Rotation};
use super::config::ModelConfig;
use super::params::{
    n_pairs, CompressionParams, EncoderParams, InteractionParams, LayerParams, SkipDotParams, SourceParams,
};
use crate::cfee::{
    absolute_position_encoding, relpos_index, temporal_decay_feature, time_bucket_index, CfeeConfig, CfeeParams,
};
use crate::error::{Error, Result};
use crate::event_model::{Event, EventKind, UserHistory};
use crate::tensor::{
    dot, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, LayerNormCache, Mat,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventToken {
    pub kind: EventKind,
    pub codes: Vec<u32>,
}

/// One source sequence as the encoder sees it: no padding, any length.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SequenceInput {
    pub tokens: Vec<EventToken>,
    pub timestamps: Vec<i64>,
}

impl SequenceInput {
    pub fn new(tokens: Vec<EventToken>, timestamps: Vec<i64>) -> Result<Self> {
        if tokens.len() != timestamps.len() {
            return Err(Error::Invalid(format!(
                "{} tokens but {} timestamps",
                tokens.len(),
                timestamps.len()
            )));
        }
        Ok(SequenceInput { tokens, timestamps })
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut out = SequenceInput::default();
        for e in events {
            out.tokens.push(EventToken {
                kind: e.kind,
                codes: e.token_codes.clone(),
            });
            out.timestamps.push(e.timestamp);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Reference time for decay and pooling: the latest timestamp.
    pub fn t_ref(&self) -> i64 {
        self.timestamps.iter().copied().max().unwrap_or(0)
    }
}

/// Per-source encoder inputs for a history; missing sources are empty.
pub fn history_inputs(history: &UserHistory, n_sources: usize) -> Result<Vec<SequenceInput>> {
    let mut out = vec![SequenceInput::default(); n_sources];
    for seq in &history.sequences {
        let s = seq.source_id as usize;
        if s >= n_sources {
            return Err(Error::Invalid(format!(
                "user {}: source_id {s} out of range (K = {n_sources})",
                history.user_id
            )));
        }
        out[s] = SequenceInput::from_events(&seq.events);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Transformer layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    h2: Mat,
    z: Mat,
    g: Mat,
}

impl LayerCache {
    pub fn attention_probs(&self) -> &[Mat] {
        &self.attn.probs
    }
}

/// Pre-norm layer: `x + Attn(LN(x))`, then `+ FFN(LN(·))` with GELU.
pub fn layer_forward(lp: &LayerParams, x: &Mat, spec: &AttnSpec) -> (Mat, LayerCache) {
    let (h1, ln1) = layer_norm(x, &lp.ln1_gain, &lp.ln1_bias);
    let (attn_out, attn) = attention_forward(&lp.attn, &h1, &h1, spec);
    let mut x1 = x.clone();
    x1.add_assign(&attn_out);

    let (h2, ln2) = layer_norm(&x1, &lp.ln2_gain, &lp.ln2_bias);
    let mut z = matmul(&h2, &lp.w1);
    for r in 0..z.rows {
        for (v, b) in z.row_mut(r).iter_mut().zip(&lp.b1) {
            *v += b;
        }
    }
    let g = Mat::from_vec(z.rows, z.cols, z.data.iter().map(|&v| gelu(v)).collect());
    let mut f = matmul(&g, &lp.w2);
    for r in 0..f.rows {
        for (v, b) in f.row_mut(r).iter_mut().zip(&lp.b2) {
            *v += b;
        }
    }
    let mut out = x1;
    out.add_assign(&f);
    (out, LayerCache { ln1, attn, ln2, h2, z, g })
}

/// Returns `dx` and the per-head logit gradients of the self-attention.
pub fn layer_backward(
    lp: &LayerParams,
    cache: &LayerCache,
    spec: &AttnSpec,
    dout: &Mat,
    grads: &mut LayerParams,
) -> (Mat, Vec<Mat>) {
    // FFN branch.
    grads.w2.add_assign(&matmul_tn(&cache.g, dout));
    add_col_sums(&mut grads.b2, dout);
    let dg = matmul_nt(dout, &lp.w2);
    let dz = Mat::from_vec(
        dg.rows,
        dg.cols,
        dg.data.iter().zip(&cache.z.data).map(|(d, &z)| d * gelu_grad(z)).collect(),
    );
    grads.w1.add_assign(&matmul_tn(&cache.h2, &dz));
    add_col_sums(&mut grads.b1, &dz);
    let dh2 = matmul_nt(&dz, &lp.w1);
    let mut dx1 = dout.clone();
    dx1.add_assign(&layer_norm_backward(
        &cache.ln2,
        &lp.ln2_gain,
        &dh2,
        &mut grads.ln2_gain,
        &mut grads.ln2_bias,
    ));

    // Attention branch.
    let ag = attention_backward(&lp.attn, &cache.attn, spec, &dx1, &mut grads.attn);
    let mut dh1 = ag.dq_in;
    dh1.add_assign(&ag.dkv_in);
    let mut dx = dx1;
    dx.add_assign(&layer_norm_backward(
        &cache.ln1,
        &lp.ln1_gain,
        &dh1,
        &mut grads.ln1_gain,
        &mut grads.ln1_bias,
    ));
    (dx, ag.dlogits)
}

fn add_col_sums(acc: &mut [f64], m: &Mat) {
    for r in 0..m.rows {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Per-source sequence encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SequenceCache {
    decay: Vec<f64>,
    rel_idx: Vec<usize>,
    time_idx: Vec<usize>,
    bias: Vec<Mat>,
    pub layers: Vec<LayerCache>,
    /// Output of each computed layer (index `l − 1` for layer `l`).
    pub outputs: Vec<Mat>,
}

/// Self-attention bias per head: relative-position plus time-delta terms.
fn self_attention_bias(cfee: &CfeeParams, cfg: &CfeeConfig, ts: &[i64]) -> (Vec<usize>, Vec<usize>, Vec<Mat>) {
    let n = ts.len();
    let mut rel_idx = Vec::with_capacity(n * n);
    let mut time_idx = Vec::with_capacity(n * n);
    for (i, &ti) in ts.iter().enumerate() {
        for (j, &tj) in ts.iter().enumerate() {
            rel_idx.push(relpos_index(i, j, cfg.relpos_window));
            time_idx.push(time_bucket_index(ti, tj, cfg));
        }
    }
    let bias = (0..cfg.n_heads)
        .map(|h| {
            let data = rel_idx
                .iter()
                .zip(&time_idx)
                .map(|(&r, &t)| cfee.relpos.get(h, r) + cfee.time_bias.get(h, t))
                .collect();
            Mat::from_vec(n, n, data)
        })
        .collect();
    (rel_idx, time_idx, bias)
}

fn check_sequence(cfg: &ModelConfig, source_id: usize, input: &SequenceInput) -> Result<()> {
    if input.tokens.len() != input.timestamps.len() {
        return Err(Error::Invalid("token/timestamp length mismatch".into()));
    }
    if input.is_empty() {
        return Err(Error::EmptySequence);
    }
    let vocab = cfg.vocab_sizes[source_id];
    for tok in &input.tokens {
        if let Some(&c) = tok.codes.iter().find(|&&c| c as usize >= vocab) {
            return Err(Error::Invalid(format!(
                "token code {c} out of range for source {source_id} (vocab {vocab})"
            )));
        }
    }
    Ok(())
}

fn embed_events(sp: &SourceParams, cfg: &ModelConfig, input: &SequenceInput) -> Result<(Mat, Vec<f64>)> {
    let d = cfg.d_model;
    let t_ref = input.t_ref();
    let mut x = Mat::zeros(input.len(), d);
    let mut decay = Vec::with_capacity(input.len());
    for (i, (tok, &ts)) in input.tokens.iter().zip(&input.timestamps).enumerate() {
        let s = temporal_decay_feature(t_ref, ts, cfg.cfee.decay_tau)?;
        decay.push(s);
        let pe = absolute_position_encoding(i, d);
        let row = x.row_mut(i);
        let kind = sp.kind_emb.row(tok.kind.index());
        for c in 0..d {
            row[c] = kind[c] + pe[c] + sp.cfee.decay_w[c] * s + sp.cfee.decay_b[c];
        }
        if !tok.codes.is_empty() {
            let inv = 1.0 / tok.codes.len() as f64;
            for &code in &tok.codes {
                for (v, e) in row.iter_mut().zip(sp.token_emb.row(code as usize)) {
                    *v += e * inv;
                }
            }
        }
    }
    Ok((x, decay))
}

fn embed_backward(sp_grad: &mut SourceParams, input: &SequenceInput, decay: &[f64], dx: &Mat) {
    for (i, tok) in input.tokens.iter().enumerate() {
        let g = dx.row(i);
        for (a, v) in sp_grad.kind_emb.row_mut(tok.kind.index()).iter_mut().zip(g) {
            *a += v;
        }
        for c in 0..g.len() {
            sp_grad.cfee.decay_w[c] += g[c] * decay[i];
            sp_grad.cfee.decay_b[c] += g[c];
        }
        if !tok.codes.is_empty() {
            let inv = 1.0 / tok.codes.len() as f64;
            for &code in &tok.codes {
                for (a, v) in sp_grad.token_emb.row_mut(code as usize).iter_mut().zip(g) {
                    *a += v * inv;
                }
            }
        }
    }
}

fn self_attention_spec<'a>(cfg: &'a ModelConfig, ts: &'a [i64], bias: &'a [Mat]) -> AttnSpec<'a> {
    AttnSpec {
        n_heads: cfg.n_heads,
        rotation: Some(Rotation {
            q_ts: ts,
            k_ts: ts,
            periods: &cfg.cfee.cyclic_periods,
        }),
        bias: Some(bias),
    }
}

pub(crate) fn encode_cached(
    sp: &SourceParams,
    cfg: &ModelConfig,
    source_id: usize,
    input: &SequenceInput,
) -> Result<SequenceCache> {
    check_sequence(cfg, source_id, input)?;
    let (mut x, decay) = embed_events(sp, cfg, input)?;
    let (rel_idx, time_idx, bias) = self_attention_bias(&sp.cfee, &cfg.cfee, &input.timestamps);
    let spec = self_attention_spec(cfg, &input.timestamps, &bias);
    let depth = cfg.max_tap();
    let mut layers = Vec::with_capacity(depth);
    let mut outputs = Vec::with_capacity(depth);
    for lp in &sp.layers[..depth] {
        let (y, c) = layer_forward(lp, &x, &spec);
        layers.push(c);
        outputs.push(y.clone());
        x = y;
    }
    Ok(SequenceCache {
        decay,
        rel_idx,
        time_idx,
        bias,
        layers,
        outputs,
    })
}

/// `dtaps[l − 1]` is the upstream gradient at the output of layer `l`.
fn encode_backward(
    sp: &SourceParams,
    cfg: &ModelConfig,
    input: &SequenceInput,
    cache: &SequenceCache,
    dtaps: &[Option<Mat>],
    g: &mut SourceParams,
) {
    let n = input.len();
    let spec = self_attention_spec(cfg, &input.timestamps, &cache.bias);
    let mut dx = Mat::zeros(n, cfg.d_model);
    let mut dbias: Vec<Mat> = (0..cfg.n_heads).map(|_| Mat::zeros(n, n)).collect();
    for l in (0..cache.layers.len()).rev() {
        if let Some(dt) = &dtaps[l] {
            dx.add_assign(dt);
        }
        let (dprev, dlogits) = layer_backward(&sp.layers[l], &cache.layers[l], &spec, &dx, &mut g.layers[l]);
        for (acc, dl) in dbias.iter_mut().zip(&dlogits) {
            acc.add_assign(dl);
        }
        dx = dprev;
    }
    for (h, db) in dbias.iter().enumerate() {
        for (k, &v) in db.data.iter().enumerate() {
            let r = cache.rel_idx[k];
            let t = cache.time_idx[k];
            g.cfee.relpos.data[h * g.cfee.relpos.cols + r] += v;
            g.cfee.time_bias.data[h * g.cfee.time_bias.cols + t] += v;
        }
    }
    embed_backward(g, input, &cache.decay, &dx);
}

/// Hidden states at each tap layer, in `tap_layers` order.
pub fn encode_sequence(
    params: &EncoderParams,
    cfg: &ModelConfig,
    source_id: usize,
    input: &SequenceInput,
) -> Result<Vec<Mat>> {
    let sp = params
        .sources
        .get(source_id)
        .ok_or_else(|| Error::Invalid(format!("source_id {source_id} out of range")))?;
    let cache = encode_cached(sp, cfg, source_id, input)?;
    Ok(cfg.tap_layers.iter().map(|&l| cache.outputs[l - 1].clone()).collect())
}

// ---------------------------------------------------------------------------
// Cross-attention pooling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PoolCache {
    attn: AttnCache,
    time_idx: Vec<usize>,
    bias: Vec<Mat>,
}

impl PoolCache {
    pub fn attention_probs(&self) -> &[Mat] {
        &self.attn.probs
    }
}

pub(crate) fn cross_attend_cached(
    pool: &AttnParams,
    cfee: &CfeeParams,
    cfg: &ModelConfig,
    hidden: &Mat,
    queries: &Mat,
    timestamps: &[i64],
) -> (Mat, PoolCache) {
    let t_ref = timestamps.iter().copied().max().unwrap_or(0);
    let time_idx: Vec<usize> = timestamps
        .iter()
        .map(|&t| time_bucket_index(t_ref, t, &cfg.cfee))
        .collect();
    let bias: Vec<Mat> = (0..cfg.n_heads)
        .map(|h| {
            let row: Vec<f64> = time_idx.iter().map(|&k| cfee.time_bias.get(h, k)).collect();
            let mut m = Mat::zeros(queries.rows, hidden.rows);
            for r in 0..queries.rows {
                m.row_mut(r).copy_from_slice(&row);
            }
            m
        })
        .collect();
    let spec = AttnSpec {
        n_heads: cfg.n_heads,
        rotation: None,
        bias: Some(&bias),
    };
    let (out, attn) = attention_forward(pool, queries, hidden, &spec);
    (out, PoolCache { attn, time_idx, bias })
}

/// Queries attend over `hidden` with a time-delta bias taken from the
/// sequence's latest timestamp. No residual connection.
pub fn cross_attend(
    pool: &AttnParams,
    cfee: &CfeeParams,
    cfg: &ModelConfig,
    hidden: &Mat,
    queries: &Mat,
    timestamps: &[i64],
) -> Result<Mat> {
    if queries.rows == 0 {
        return Err(Error::Invalid("cross_attend needs at least one query".into()));
    }
    if hidden.rows != timestamps.len() || hidden.rows == 0 {
        return Err(Error::Invalid("hidden rows must match a non-empty timestamp list".into()));
    }
    Ok(cross_attend_cached(pool, cfee, cfg, hidden, queries, timestamps).0)
}

/// Returns `(dqueries, dhidden)`; accumulates pool and time-table grads.
fn cross_attend_backward(
    pool: &AttnParams,
    cfg: &ModelConfig,
    cache: &PoolCache,
    dout: &Mat,
    g_pool: &mut AttnParams,
    g_cfee: &mut CfeeParams,
) -> (Mat, Mat) {
    let spec = AttnSpec {
        n_heads: cfg.n_heads,
        rotation: None,
        bias: Some(&cache.bias),
    };
    let ag = attention_backward(pool, &cache.attn, &spec, dout, g_pool);
    let cols = g_cfee.time_bias.cols;
    for (h, dl) in ag.dlogits.iter().enumerate() {
        for r in 0..dl.rows {
            for (j, &v) in dl.row(r).iter().enumerate() {
                g_cfee.time_bias.data[h * cols + cache.time_idx[j]] += v;
            }
        }
    }
    (ag.dq_in, ag.dkv_in)
}

// ---------------------------------------------------------------------------
// Compression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) enum CompressCache {
    SkipDot { pooled: Mat, mixed: Mat, pairs: Vec<f64>, rows: Vec<usize> },
    Interaction { attn: AttnCache, rows: Vec<usize> },
}

fn check_tapped(cfg: &ModelConfig, tapped: &[Mat]) -> Result<()> {
    if tapped.is_empty() {
        return Err(Error::Invalid("compress needs at least one tapped state".into()));
    }
    if tapped.len() != cfg.n_tapped() {
        return Err(Error::Invalid(format!(
            "expected {} tapped states, got {}",
            cfg.n_tapped(),
            tapped.len()
        )));
    }
    if tapped.iter().any(|m| m.cols != cfg.d_model || m.rows == 0) {
        return Err(Error::Invalid("tapped states must be non-empty with d_model columns".into()));
    }
    Ok(())
}

/// Upper-triangular (including diagonal) Gram entries of the rows of `h`,
/// row-major over `i <= j`.
pub fn pairwise_dots(h: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_pairs(h.rows));
    for i in 0..h.rows {
        for j in i..h.rows {
            out.push(dot(h.row(i), h.row(j)));
        }
    }
    out
}

/// Fixed `1/d` factor on the dot branch's weights. Raw Gram entries grow
/// with `d`; without it that branch dominates early updates.
pub(crate) fn dot_scale(d: usize) -> f64 {
    1.0 / d as f64
}

fn mean_rows(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / m.rows as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

fn skip_dot_forward(p: &SkipDotParams, cfg: &ModelConfig, tapped: &[Mat]) -> (Mat, CompressCache) {
    let d = cfg.d_model;
    let pooled = Mat::from_rows(&tapped.iter().map(mean_rows).collect::<Vec<_>>());
    let mixed = matmul(&p.mix, &pooled);
    let mut out = matmul(&mixed, &p.proj);
    let pairs = pairwise_dots(&pooled);
    let scale = dot_scale(d);
    for r in 0..p.dot_w.rows {
        out.data[r] += scale * dot(p.dot_w.row(r), &pairs) + p.dot_b[r];
    }
    debug_assert_eq!(out.data.len(), cfg.n_outputs * d);
    (
        out,
        CompressCache::SkipDot {
            pooled,
            mixed,
            pairs,
            rows: tapped.iter().map(|m| m.rows).collect(),
        },
    )
}

fn interaction_spec(cfg: &ModelConfig) -> AttnSpec<'static> {
    AttnSpec {
        n_heads: cfg.n_heads,
        rotation: None,
        bias: None,
    }
}

fn interaction_forward(p: &InteractionParams, cfg: &ModelConfig, tapped: &[Mat]) -> (Mat, CompressCache) {
    let kv = Mat::vstack(&tapped.iter().collect::<Vec<_>>());
    let (out, attn) = attention_forward(&p.attn, &p.queries, &kv, &interaction_spec(cfg));
    (
        out,
        CompressCache::Interaction {
            attn,
            rows: tapped.iter().map(|m| m.rows).collect(),
        },
    )
}

pub(crate) fn compress_cached(
    params: &CompressionParams,
    cfg: &ModelConfig,
    tapped: &[Mat],
) -> Result<(Mat, CompressCache)> {
    check_tapped(cfg, tapped)?;
    Ok(match params {
        CompressionParams::SkipDot(p) => skip_dot_forward(p, cfg, tapped),
        CompressionParams::Interaction(p) => interaction_forward(p, cfg, tapped),
    })
}

/// Compresses `K × |taps|` pooled matrices into `M × d`.
pub fn compress(params: &CompressionParams, cfg: &ModelConfig, tapped: &[Mat]) -> Result<Mat> {
    Ok(compress_cached(params, cfg, tapped)?.0)
}

fn compress_backward(
    params: &CompressionParams,
    cfg: &ModelConfig,
    cache: &CompressCache,
    dout: &Mat,
    grads: &mut CompressionParams,
) -> Vec<Mat> {
    let d = cfg.d_model;
    match (params, cache, grads) {
        (
            CompressionParams::SkipDot(p),
            CompressCache::SkipDot { pooled, mixed, pairs, rows },
            CompressionParams::SkipDot(g),
        ) => {
            g.proj.add_assign(&matmul_tn(mixed, dout));
            let dmixed = matmul_nt(dout, &p.proj);
            g.mix.add_assign(&matmul_nt(&dmixed, pooled));
            let mut dpooled = matmul_tn(&p.mix, &dmixed);

            let mut dpairs = vec![0.0; pairs.len()];
            let scale = dot_scale(d);
            for (r, &dv) in dout.data.iter().enumerate() {
                g.dot_b[r] += dv;
                let dv_w = dv * scale;
                let grow = g.dot_w.row_mut(r);
                for (gw, pv) in grow.iter_mut().zip(pairs) {
                    *gw += dv_w * pv;
                }
                for (dp, w) in dpairs.iter_mut().zip(p.dot_w.row(r)) {
                    *dp += dv_w * w;
                }
            }
            let t = pooled.rows;
            let mut k = 0;
            for i in 0..t {
                for j in i..t {
                    let dp = dpairs[k];
                    k += 1;
                    for c in 0..d {
                        let (hi, hj) = (pooled.get(i, c), pooled.get(j, c));
                        dpooled.data[i * d + c] += dp * hj;
                        dpooled.data[j * d + c] += dp * hi;
                    }
                }
            }
            rows.iter()
                .enumerate()
                .map(|(ti, &n)| {
                    let inv = 1.0 / n as f64;
                    let row: Vec<f64> = dpooled.row(ti).iter().map(|v| v * inv).collect();
                    Mat::from_rows(&vec![row; n])
                })
                .collect()
        }
        (
            CompressionParams::Interaction(p),
            CompressCache::Interaction { attn, rows },
            CompressionParams::Interaction(g),
        ) => {
            let ag = attention_backward(&p.attn, attn, &interaction_spec(cfg), dout, &mut g.attn);
            g.queries.add_assign(&ag.dq_in);
            let mut out = Vec::with_capacity(rows.len());
            let mut start = 0;
            for &n in rows {
                out.push(Mat::from_vec(n, d, ag.dkv_in.data[start * d..(start + n) * d].to_vec()));
                start += n;
            }
            out
        }
        _ => unreachable!("compression params, cache and grads disagree on variant"),
    }
}

// ---------------------------------------------------------------------------
// Whole user
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct ActiveSource {
    seq: SequenceCache,
    pools: Vec<PoolCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct UserForward {
    sources: Vec<Option<ActiveSource>>,
    compress: CompressCache,
    pub output: Mat,
}

pub(crate) fn forward_inputs(
    params: &EncoderParams,
    cfg: &ModelConfig,
    user_id: u64,
    inputs: &[SequenceInput],
) -> Result<UserForward> {
    if inputs.len() != cfg.n_sources {
        return Err(Error::Invalid(format!(
            "expected {} source inputs, got {}",
            cfg.n_sources,
            inputs.len()
        )));
    }
    if inputs.iter().all(SequenceInput::is_empty) {
        return Err(Error::EmptyHistory(user_id));
    }
    let mut tapped = Vec::with_capacity(cfg.n_tapped());
    let mut sources = Vec::with_capacity(cfg.n_sources);
    for (s, (sp, input)) in params.sources.iter().zip(inputs).enumerate() {
        if input.is_empty() {
            tapped.extend(cfg.tap_layers.iter().map(|_| sp.placeholder.clone()));
            sources.push(None);
            continue;
        }
        let seq = encode_cached(sp, cfg, s, input)?;
        let mut pools = Vec::with_capacity(cfg.tap_layers.len());
        for &l in &cfg.tap_layers {
            let (pooled, pc) =
                cross_attend_cached(&sp.pool, &sp.cfee, cfg, &seq.outputs[l - 1], &sp.pool_queries, &input.timestamps);
            tapped.push(pooled);
            pools.push(pc);
        }
        sources.push(Some(ActiveSource { seq, pools }));
    }
    let (output, compress) = compress_cached(&params.compression, cfg, &tapped)?;
    if !output.all_finite() {
        return Err(Error::Invalid(format!("user {user_id}: non-finite embedding")));
    }
    Ok(UserForward {
        sources,
        compress,
        output,
    })
}

/// Accumulates parameter gradients for upstream gradient `dout` (`M × d`).
pub(crate) fn backward_inputs(
    params: &EncoderParams,
    cfg: &ModelConfig,
    inputs: &[SequenceInput],
    fwd: &UserForward,
    dout: &Mat,
    grads: &mut EncoderParams,
) {
    let dtapped = compress_backward(&params.compression, cfg, &fwd.compress, dout, &mut grads.compression);
    let n_taps = cfg.tap_layers.len();
    for (s, active) in fwd.sources.iter().enumerate() {
        let sp = &params.sources[s];
        let gs = &mut grads.sources[s];
        let mine = &dtapped[s * n_taps..(s + 1) * n_taps];
        match active {
            None => {
                for dt in mine {
                    gs.placeholder.add_assign(dt);
                }
            }
            Some(src) => {
                let mut dtaps: Vec<Option<Mat>> = vec![None; src.seq.layers.len()];
                for ((&l, pc), dt) in cfg.tap_layers.iter().zip(&src.pools).zip(mine) {
                    let (dq, dh) = cross_attend_backward(&sp.pool, cfg, pc, dt, &mut gs.pool, &mut gs.cfee);
                    gs.pool_queries.add_assign(&dq);
                    match &mut dtaps[l - 1] {
                        Some(acc) => acc.add_assign(&dh),
                        slot => *slot = Some(dh),
                    }
                }
                encode_backward(sp, cfg, &inputs[s], &src.seq, &dtaps, gs);
            }
        }
    }
}

/// Per-source attention probabilities of the last forward pass, for checks.
pub(crate) fn all_attention_probs(fwd: &UserForward) -> Vec<&Mat> {
    let mut out = Vec::new();
    for src in fwd.sources.iter().flatten() {
        for l in &src.seq.layers {
            out.extend(l.attention_probs());
        }
        for p in &src.pools {
            out.extend(p.attention_probs());
        }
    }
    if let CompressCache::Interaction { attn, .. } = &fwd.compress {
        out.extend(&attn.probs);
    }
    out
}
