//! Reference implementations written from the textbook definitions, sharing
//! no code with the library beyond plain data types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use alure::event_model::{AdsCatalog, EngagementLog};
use alure::graph::SimilarityGraph;
use alure::pipeline::EmbeddingSnapshot;
use alure::retrieval::{Candidate, CandidateSet, Reason, RetrievalConfig};

pub type Matrix = Vec<Vec<f64>>;

pub fn mat_mul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Matrix {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| gain[c] * (v - mean) / (var + eps).sqrt() + bias[c])
                .collect()
        })
        .collect()
}

pub fn gelu_tanh(z: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Standard multi-head scaled dot-product self-attention.
pub fn self_attention(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, wo: &Matrix, heads: usize) -> Matrix {
    let (q, k, v) = (mat_mul(x, wq), mat_mul(x, wk), mat_mul(x, wv));
    let d = wq[0].len();
    let dh = d / heads;
    let n = x.len();
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&logits);
            for c in cols.clone() {
                concat[i][c] = (0..n).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    mat_mul(&concat, wo)
}

pub struct RefLayer {
    pub ln1: (Vec<f64>, Vec<f64>),
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: (Vec<f64>, Vec<f64>),
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// `y = x + MHA(LN(x))`, `out = y + W2·gelu(W1·LN(y) + b1) + b2`.
pub fn prenorm_layer(layer: &RefLayer, x: &Matrix, heads: usize, eps: f64) -> Matrix {
    let h1 = layer_norm(x, &layer.ln1.0, &layer.ln1.1, eps);
    let a = self_attention(&h1, &layer.wq, &layer.wk, &layer.wv, &layer.wo, heads);
    let y: Matrix = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(p, q)| p + q).collect()).collect();
    let h2 = layer_norm(&y, &layer.ln2.0, &layer.ln2.1, eps);
    let z = mat_mul(&h2, &layer.w1);
    let g: Matrix = z
        .iter()
        .map(|r| r.iter().zip(&layer.b1).map(|(v, b)| gelu_tanh(v + b)).collect())
        .collect();
    let f = mat_mul(&g, &layer.w2);
    y.iter()
        .zip(&f)
        .map(|(r, s)| r.iter().zip(s).zip(&layer.b2).map(|((p, q), b)| p + q + b).collect())
        .collect()
}

pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Mean of the `M` rows, scaled to unit length.
pub fn unit_mean(rows: &[&[f64]]) -> Option<Vec<f64>> {
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for c in 0..d {
            mean[c] += r[c];
        }
    }
    for v in mean.iter_mut() {
        *v /= rows.len() as f64;
    }
    let mut sq = 0.0;
    for v in &mean {
        sq += v * v;
    }
    let norm = sq.sqrt();
    (norm > 0.0).then(|| mean.iter().map(|v| v / norm).collect())
}

/// Exact k-NN per region by scoring every pair and fully sorting.
pub fn brute_force_graph(snapshot: &EmbeddingSnapshot, k: usize) -> BTreeMap<u64, Vec<(u64, f64)>> {
    let mut unit = BTreeMap::new();
    for (&id, e) in &snapshot.records {
        let rows: Vec<&[f64]> = (0..e.vectors.rows).map(|r| e.vectors.row(r)).collect();
        if let Some(u) = unit_mean(&rows) {
            unit.insert(id, u);
        }
    }
    let mut edges = BTreeMap::new();
    for ids in snapshot.region_index.values() {
        let members: Vec<u64> = ids.iter().copied().filter(|id| unit.contains_key(id)).collect();
        if members.len() < 2 {
            continue;
        }
        for &u in &members {
            let mut scored: Vec<(u64, f64)> = members
                .iter()
                .filter(|&&v| v != u)
                .map(|&v| {
                    let mut s = 0.0;
                    for (a, b) in unit[&u].iter().zip(&unit[&v]) {
                        s += a * b;
                    }
                    (v, s.clamp(-1.0, 1.0))
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            scored.truncate(k);
            edges.insert(u, scored);
        }
    }
    edges
}

/// Enumerates every (neighbor, engagement, path) triple, then reduces.
pub fn brute_force_retrieval(
    user: u64,
    graph: &SimilarityGraph,
    engagements: &EngagementLog,
    catalog: &AdsCatalog,
    cfg: &RetrievalConfig,
    now: i64,
) -> CandidateSet {
    let mut all = Vec::new();
    for &(v, s) in graph.neighbors(user) {
        for e in engagements.get(v) {
            let age = (now - e.timestamp).max(0) as f64;
            let score = s.max(0.0) * 0.5f64.powf(age / cfg.recency_half_life as f64);
            if cfg.enable_direct {
                all.push(Candidate {
                    ad_id: e.ad_id,
                    source_user: v,
                    reason: Reason::Direct,
                    score,
                });
            }
            if cfg.enable_account_expansion && cfg.expansion_event_kinds.contains(&e.kind) {
                for &ad in catalog.ads_of(e.account_id).iter().filter(|&&a| a != e.ad_id) {
                    all.push(Candidate {
                        ad_id: ad,
                        source_user: v,
                        reason: Reason::AccountExpansion,
                        score: score * cfg.expansion_discount,
                    });
                }
            }
        }
    }
    let engaged: Vec<u64> = engagements.get(user).iter().map(|e| e.ad_id).collect();
    all.retain(|c| !engaged.contains(&c.ad_id));
    // Best path per ad: highest score, then direct, then lowest source user.
    all.sort_by(|a, b| {
        a.ad_id
            .cmp(&b.ad_id)
            .then(b.score.partial_cmp(&a.score).unwrap())
            .then((a.reason == Reason::AccountExpansion).cmp(&(b.reason == Reason::AccountExpansion)))
            .then(a.source_user.cmp(&b.source_user))
    });
    all.dedup_by_key(|c| c.ad_id);
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.ad_id.cmp(&b.ad_id)));
    all.truncate(cfg.cap);
    CandidateSet {
        user_id: user,
        candidates: all,
    }
}

/// Binary log loss of `p` against labels, divided by that of the base rate.
pub fn normalized_entropy(p: &[f64], y: &[bool]) -> f64 {
    let n = y.len() as f64;
    let mut ce = 0.0;
    for (pi, &yi) in p.iter().zip(y) {
        ce += if yi { -pi.ln() } else { -(1.0 - pi).ln() };
    }
    let b = y.iter().filter(|&&v| v).count() as f64 / n;
    let base = -(b * b.ln() + (1.0 - b) * (1.0 - b).ln());
    (ce / n) / base
}
