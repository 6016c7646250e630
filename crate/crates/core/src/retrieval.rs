//! u2u candidate generation: ads engaged by a user's graph neighbors, plus
//! other ads from accounts those neighbors converted on.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::{AdsCatalog, EngagementLog, EventKind};
use crate::graph::SimilarityGraph;
use crate::parallel::par_map;

pub const HISTOGRAM_BUCKET_WIDTH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub cap: usize,
    /// Seconds for an engagement's score to halve.
    pub recency_half_life: i64,
    pub enable_direct: bool,
    pub enable_account_expansion: bool,
    pub expansion_event_kinds: Vec<EventKind>,
    pub expansion_discount: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            cap: 1500,
            recency_half_life: 7 * 86_400,
            enable_direct: true,
            enable_account_expansion: true,
            expansion_event_kinds: vec![EventKind::Conversion],
            expansion_discount: 0.5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cap == 0 {
            return Err(Error::config("retrieval.cap", "must be at least 1"));
        }
        if self.recency_half_life <= 0 {
            return Err(Error::config("retrieval.recency_half_life", "must be positive"));
        }
        if !(self.expansion_discount >= 0.0 && self.expansion_discount.is_finite()) {
            return Err(Error::config("retrieval.expansion_discount", "must be finite and non-negative"));
        }
        if let Some(k) = self.expansion_event_kinds.iter().find(|k| !k.is_engagement()) {
            return Err(Error::config(
                "retrieval.expansion_event_kinds",
                format!("`{}` is not a click/conversion kind", k.as_str()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reason {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "expansion")]
    AccountExpansion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "ad")]
    pub ad_id: u64,
    #[serde(rename = "src")]
    pub source_user: u64,
    pub reason: Reason,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    #[serde(rename = "user")]
    pub user_id: u64,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ad_ids(&self) -> BTreeSet<u64> {
        self.candidates.iter().map(|c| c.ad_id).collect()
    }
}

/// `max(0, s) · 2^(−age / half_life)`, age clamped at 0.
pub fn recency_score(similarity: f64, now: i64, t_event: i64, half_life: i64) -> f64 {
    let age = (now - t_event).max(0) as f64;
    similarity.max(0.0) * (-age / half_life as f64).exp2()
}

/// Whether `new` should replace `old` for the same ad: higher score wins,
/// then direct over expansion, then the lower source user.
fn better(new: &Candidate, old: &Candidate) -> bool {
    match new.score.partial_cmp(&old.score) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Equal) => (new.reason, new.source_user) < (old.reason, old.source_user),
        _ => false,
    }
}

pub fn retrieve_for_user(
    user: u64,
    graph: &SimilarityGraph,
    engagements: &EngagementLog,
    catalog: &AdsCatalog,
    cfg: &RetrievalConfig,
    now: i64,
) -> CandidateSet {
    let seen: BTreeSet<u64> = engagements.get(user).iter().map(|e| e.ad_id).collect();
    let mut best: BTreeMap<u64, Candidate> = BTreeMap::new();
    let mut offer = |c: Candidate| {
        if seen.contains(&c.ad_id) {
            return;
        }
        match best.get(&c.ad_id) {
            Some(old) if !better(&c, old) => {}
            _ => {
                best.insert(c.ad_id, c);
            }
        }
    };
    for &(v, s) in graph.neighbors(user) {
        for e in engagements.get(v) {
            let score = recency_score(s, now, e.timestamp, cfg.recency_half_life);
            if cfg.enable_direct {
                offer(Candidate {
                    ad_id: e.ad_id,
                    source_user: v,
                    reason: Reason::Direct,
                    score,
                });
            }
            if cfg.enable_account_expansion && cfg.expansion_event_kinds.contains(&e.kind) {
                for &ad in catalog.ads_of(e.account_id) {
                    if ad != e.ad_id {
                        offer(Candidate {
                            ad_id: ad,
                            source_user: v,
                            reason: Reason::AccountExpansion,
                            score: score * cfg.expansion_discount,
                        });
                    }
                }
            }
        }
    }
    let mut candidates: Vec<Candidate> = best.into_values().collect();
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.ad_id.cmp(&b.ad_id))
    });
    candidates.truncate(cfg.cap);
    CandidateSet {
        user_id: user,
        candidates,
    }
}

/// Per-user candidate counts in buckets of 50 over `[0, cap]`; the last
/// bucket also holds `cap` itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bucket_width: usize,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(cap: usize) -> Self {
        Histogram {
            bucket_width: HISTOGRAM_BUCKET_WIDTH,
            counts: vec![0; cap.div_ceil(HISTOGRAM_BUCKET_WIDTH).max(1)],
        }
    }

    pub fn add(&mut self, count: usize) {
        let i = (count / self.bucket_width).min(self.counts.len() - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Two columns, `bucket_low count`, one bucket per line.
    pub fn to_text(&self) -> String {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}\t{c}\n", i * self.bucket_width))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutput {
    /// One set per graph node, ascending user id.
    pub sets: Vec<CandidateSet>,
    pub histogram: Histogram,
}

pub fn retrieve_all(
    graph: &SimilarityGraph,
    engagements: &EngagementLog,
    catalog: &AdsCatalog,
    cfg: &RetrievalConfig,
    now: i64,
) -> RetrievalOutput {
    let users: Vec<u64> = graph.edges.keys().copied().collect();
    let sets = par_map(&users, |&u| retrieve_for_user(u, graph, engagements, catalog, cfg, now));
    let mut histogram = Histogram::new(cfg.cap);
    for s in &sets {
        histogram.add(s.len());
    }
    RetrievalOutput { sets, histogram }
}

pub fn write_candidates<W: Write>(sets: &[CandidateSet], mut w: W) -> Result<()> {
    for s in sets {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io("<candidate output>", e))?;
    }
    w.flush().map_err(|e| Error::io("<candidate output>", e))
}
