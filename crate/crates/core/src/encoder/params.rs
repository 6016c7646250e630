//! Learned parameters and their canonical visitation order.
//!
//! The order produced by [`ModelParams::tensors`] is the on-disk order of
//! checkpoint tensors and must stay in lockstep with `tensors_mut`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::AttnParams;
use super::config::{CompressionVariant, ModelConfig};
use crate::cfee::CfeeParams;
use crate::event_model::EventKind;
use crate::tensor::Mat;


/// Token codes are averaged per event, so they start large enough to
/// dominate the shared positional and decay terms.
pub const TOKEN_INIT_SCALE: f64 = 5.0;
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub attn: AttnParams,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    /// `d × d_ffn`
    pub w1: Mat,
    pub b1: Vec<f64>,
    /// `d_ffn × d`
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(d: usize, f: usize) -> Self {
        LayerParams {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            attn: AttnParams::zeros(d),
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w1: Mat::zeros(d, f),
            b1: vec![0.0; f],
            w2: Mat::zeros(f, d),
            b2: vec![0.0; d],
        }
    }

    pub fn init<R: Rng>(d: usize, f: usize, rng: &mut R) -> Self {
        let sd = 1.0 / (d as f64).sqrt();
        LayerParams {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            attn: attn_init(d, rng),
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w1: Mat::random(d, f, sd, rng),
            b1: vec![0.0; f],
            w2: Mat::random(f, d, 1.0 / (f as f64).sqrt(), rng),
            b2: vec![0.0; d],
        }
    }
}

fn attn_init<R: Rng>(d: usize, rng: &mut R) -> AttnParams {
    let s = 1.0 / (d as f64).sqrt();
    AttnParams {
        wq: Mat::random(d, d, s, rng),
        wk: Mat::random(d, d, s, rng),
        wv: Mat::random(d, d, s, rng),
        wo: Mat::random(d, d, s, rng),
    }
}

/// One per-source stack: embeddings, CFEE state, layers, pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    pub token_emb: Mat,
    /// One row per [`EventKind`].
    pub kind_emb: Mat,
    pub cfee: CfeeParams,
    pub layers: Vec<LayerParams>,
    /// `M × d` learned cross-attention queries.
    pub pool_queries: Mat,
    pub pool: AttnParams,
    /// `M × d` pooled state used when the source has no events.
    pub placeholder: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipDotParams {
    /// `M × T` mixing of pooled rows.
    pub mix: Mat,
    /// `d × d`
    pub proj: Mat,
    /// `(M·d) × T(T+1)/2`
    pub dot_w: Mat,
    pub dot_b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionParams {
    pub queries: Mat,
    pub attn: AttnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompressionParams {
    SkipDot(SkipDotParams),
    Interaction(InteractionParams),
}

/// Everything `forward_user` reads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub sources: Vec<SourceParams>,
    pub compression: CompressionParams,
}

/// Encoder plus training-only state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// `n_accounts × d` positive/negative targets for the contrastive loss.
    pub accounts: Mat,
}

pub fn n_pairs(t: usize) -> usize {
    t * (t + 1) / 2
}

impl EncoderParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let m = cfg.n_outputs;
        let t = cfg.n_tapped();
        let sources = cfg
            .vocab_sizes
            .iter()
            .map(|&v| SourceParams {
                token_emb: Mat::zeros(v, d),
                kind_emb: Mat::zeros(EventKind::ALL.len(), d),
                cfee: CfeeParams::zeros(&cfg.cfee),
                layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d, cfg.d_ffn())).collect(),
                pool_queries: Mat::zeros(m, d),
                pool: AttnParams::zeros(d),
                placeholder: Mat::zeros(m, d),
            })
            .collect();
        let compression = match cfg.compression {
            CompressionVariant::SkipDot => CompressionParams::SkipDot(SkipDotParams {
                mix: Mat::zeros(m, t),
                proj: Mat::zeros(d, d),
                dot_w: Mat::zeros(m * d, n_pairs(t)),
                dot_b: vec![0.0; m * d],
            }),
            CompressionVariant::Interaction => CompressionParams::Interaction(InteractionParams {
                queries: Mat::zeros(m, d),
                attn: AttnParams::zeros(d),
            }),
        };
        EncoderParams {
            sources,
            compression,
        }
    }

    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let m = cfg.n_outputs;
        let t = cfg.n_tapped();
        let sd = 1.0 / (d as f64).sqrt();
        let sources = cfg
            .vocab_sizes
            .iter()
            .map(|&v| SourceParams {
                token_emb: Mat::random(v, d, TOKEN_INIT_SCALE, rng),
                kind_emb: Mat::random(EventKind::ALL.len(), d, 0.5, rng),
                cfee: CfeeParams::random(&cfg.cfee, rng),
                layers: (0..cfg.n_layers)
                    .map(|_| LayerParams::init(d, cfg.d_ffn(), rng))
                    .collect(),
                pool_queries: Mat::random(m, d, 0.5, rng),
                pool: attn_init(d, rng),
                placeholder: Mat::random(m, d, 0.1, rng),
            })
            .collect();
        let compression = match cfg.compression {
            CompressionVariant::SkipDot => CompressionParams::SkipDot(SkipDotParams {
                mix: Mat::random(m, t, 1.0 / (t as f64).sqrt(), rng),
                proj: Mat::random(d, d, sd, rng),
                dot_w: Mat::random(m * d, n_pairs(t), 0.01, rng),
                dot_b: vec![0.0; m * d],
            }),
            CompressionVariant::Interaction => CompressionParams::Interaction(InteractionParams {
                queries: Mat::random(m, d, 0.5, rng),
                attn: attn_init(d, rng),
            }),
        };
        EncoderParams {
            sources,
            compression,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (s, sp) in self.sources.iter().enumerate() {
            let p = format!("source{s}");
            out.push((format!("{p}.token_emb"), &sp.token_emb.data));
            out.push((format!("{p}.kind_emb"), &sp.kind_emb.data));
            out.push((format!("{p}.cfee.decay_w"), &sp.cfee.decay_w));
            out.push((format!("{p}.cfee.decay_b"), &sp.cfee.decay_b));
            out.push((format!("{p}.cfee.relpos"), &sp.cfee.relpos.data));
            out.push((format!("{p}.cfee.time_bias"), &sp.cfee.time_bias.data));
            for (l, lp) in sp.layers.iter().enumerate() {
                let q = format!("{p}.layer{l}");
                out.push((format!("{q}.ln1_gain"), &lp.ln1_gain));
                out.push((format!("{q}.ln1_bias"), &lp.ln1_bias));
                push_attn(&mut out, &format!("{q}.attn"), &lp.attn);
                out.push((format!("{q}.ln2_gain"), &lp.ln2_gain));
                out.push((format!("{q}.ln2_bias"), &lp.ln2_bias));
                out.push((format!("{q}.w1"), &lp.w1.data));
                out.push((format!("{q}.b1"), &lp.b1));
                out.push((format!("{q}.w2"), &lp.w2.data));
                out.push((format!("{q}.b2"), &lp.b2));
            }
            out.push((format!("{p}.pool_queries"), &sp.pool_queries.data));
            push_attn(&mut out, &format!("{p}.pool"), &sp.pool);
            out.push((format!("{p}.placeholder"), &sp.placeholder.data));
        }
        match &self.compression {
            CompressionParams::SkipDot(c) => {
                out.push(("compress.mix".into(), &c.mix.data));
                out.push(("compress.proj".into(), &c.proj.data));
                out.push(("compress.dot_w".into(), &c.dot_w.data));
                out.push(("compress.dot_b".into(), &c.dot_b));
            }
            CompressionParams::Interaction(c) => {
                out.push(("compress.queries".into(), &c.queries.data));
                push_attn(&mut out, "compress.attn", &c.attn);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for sp in &mut self.sources {
            out.push(&mut sp.token_emb.data);
            out.push(&mut sp.kind_emb.data);
            out.push(&mut sp.cfee.decay_w);
            out.push(&mut sp.cfee.decay_b);
            out.push(&mut sp.cfee.relpos.data);
            out.push(&mut sp.cfee.time_bias.data);
            for lp in &mut sp.layers {
                out.push(&mut lp.ln1_gain);
                out.push(&mut lp.ln1_bias);
                push_attn_mut(&mut out, &mut lp.attn);
                out.push(&mut lp.ln2_gain);
                out.push(&mut lp.ln2_bias);
                out.push(&mut lp.w1.data);
                out.push(&mut lp.b1);
                out.push(&mut lp.w2.data);
                out.push(&mut lp.b2);
            }
            out.push(&mut sp.pool_queries.data);
            push_attn_mut(&mut out, &mut sp.pool);
            out.push(&mut sp.placeholder.data);
        }
        match &mut self.compression {
            CompressionParams::SkipDot(c) => {
                out.push(&mut c.mix.data);
                out.push(&mut c.proj.data);
                out.push(&mut c.dot_w.data);
                out.push(&mut c.dot_b);
            }
            CompressionParams::Interaction(c) => {
                out.push(&mut c.queries.data);
                push_attn_mut(&mut out, &mut c.attn);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn push_attn<'a>(out: &mut Vec<(String, &'a [f64])>, prefix: &str, a: &'a AttnParams) {
    out.push((format!("{prefix}.wq"), &a.wq.data));
    out.push((format!("{prefix}.wk"), &a.wk.data));
    out.push((format!("{prefix}.wv"), &a.wv.data));
    out.push((format!("{prefix}.wo"), &a.wo.data));
}

fn push_attn_mut<'a>(out: &mut Vec<&'a mut [f64]>, a: &'a mut AttnParams) {
    out.push(&mut a.wq.data);
    out.push(&mut a.wk.data);
    out.push(&mut a.wv.data);
    out.push(&mut a.wo.data);
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            encoder: EncoderParams::zeros(cfg),
            accounts: Mat::zeros(cfg.n_accounts, cfg.d_model),
        }
    }

    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder = EncoderParams::init(cfg, &mut rng);
        let accounts = Mat::random(cfg.n_accounts, cfg.d_model, 0.5, &mut rng);
        ModelParams { encoder, accounts }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.encoder.tensors();
        out.push(("accounts".into(), &self.accounts.data));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.push(&mut self.accounts.data);
        out
    }

    /// Tensor lengths in canonical order, computed without allocating.
    pub fn tensor_lengths(cfg: &ModelConfig) -> Vec<usize> {
        let d = cfg.d_model;
        let f = cfg.d_ffn();
        let m = cfg.n_outputs;
        let h = cfg.n_heads;
        let t = cfg.n_tapped();
        let mut out = Vec::new();
        for &v in &cfg.vocab_sizes {
            out.extend([v * d, EventKind::ALL.len() * d, d, d]);
            out.extend([h * cfg.cfee.relpos_table_len(), h * cfg.cfee.time_table_len()]);
            for _ in 0..cfg.n_layers {
                out.extend([d, d, d * d, d * d, d * d, d * d, d, d, d * f, f, f * d, d]);
            }
            out.extend([m * d, d * d, d * d, d * d, d * d, m * d]);
        }
        match cfg.compression {
            CompressionVariant::SkipDot => out.extend([m * t, d * d, m * d * n_pairs(t), m * d]),
            CompressionVariant::Interaction => out.extend([m * d, d * d, d * d, d * d, d * d]),
        }
        out.push(cfg.n_accounts * d);
        out
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.accounts.len()
    }

    /// In-place `self -= lr · grads`.
    pub fn sgd_step(&mut self, grads: &ModelParams, lr: f64) {
        let g = grads.tensors();
        for (p, (_, g)) in self.tensors_mut().into_iter().zip(g) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= lr * gv;
            }
        }
    }
}
