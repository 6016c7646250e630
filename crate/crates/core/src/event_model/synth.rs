//! Deterministic synthetic users with latent interest clusters and diurnal /
//! weekly activity rhythms.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AdsCatalog, EngagementLog, Event, EventKind, EventSequence, UserHistory, NO_ACCOUNT,
};
use crate::error::{Error, Result};

/// Source carrying ad impressions, clicks and conversions.
pub const ADS_SOURCE: u32 = 0;
/// Source carrying organic content views and comments.
pub const CONTENT_SOURCE: u32 = 1;
pub const ADS_VOCAB: usize = 256;
pub const CONTENT_VOCAB: usize = 128;
const COARSE_CODES: u32 = 64;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_clusters: usize,
    pub n_accounts: usize,
    pub horizon_days: u32,
    pub n_regions: usize,
    /// Probability an ads event comes from an own-cluster account.
    pub mix_ratio: f64,
    pub ads_per_account: usize,
    pub ads_events: (usize, usize),
    pub content_events: (usize, usize),
    pub start_time: i64,
    /// Amplitude `a` of the `1 + a·sin(2π·hour/24 + φ)` rate profile.
    pub diurnal_amplitude: f64,
    pub favorite_accounts: usize,
    pub favorite_boost: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_users: 10_000,
            n_clusters: 5,
            n_accounts: 500,
            horizon_days: 28,
            n_regions: 2,
            mix_ratio: 0.9,
            ads_per_account: 20,
            ads_events: (16, 40),
            content_events: (6, 20),
            start_time: 1_699_920_000,
            diurnal_amplitude: 0.8,
            favorite_accounts: 3,
            favorite_boost: 4.0,
        }
    }
}

impl SynthConfig {
    pub fn n_sources(&self) -> usize {
        2
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![ADS_VOCAB, CONTENT_VOCAB]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_users", self.n_users),
            ("n_clusters", self.n_clusters),
            ("n_accounts", self.n_accounts),
            ("horizon_days", self.horizon_days as usize),
            ("n_regions", self.n_regions),
            ("ads_per_account", self.ads_per_account),
        ];
        for (field, v) in positive {
            if v < 1 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.n_clusters > self.n_users {
            return Err(Error::config("n_clusters", "must not exceed n_users"));
        }
        if self.ads_per_account > 10_000 {
            return Err(Error::config("ads_per_account", "must be <= 10000"));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::config("mix_ratio", "must lie in [0, 1]"));
        }
        if self.ads_events.0 > self.ads_events.1 || self.content_events.0 > self.content_events.1 {
            return Err(Error::config("ads_events", "min must not exceed max"));
        }
        if self.start_time <= 0 {
            return Err(Error::config("start_time", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.diurnal_amplitude) {
            return Err(Error::config("diurnal_amplitude", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn end_time(&self) -> i64 {
        self.start_time + self.horizon_days as i64 * DAY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub histories: Vec<UserHistory>,
    pub engagements: EngagementLog,
    pub catalog: AdsCatalog,
    pub ground_truth: BTreeMap<u64, usize>,
    pub account_cluster: BTreeMap<u64, usize>,
}

struct UserProfile {
    phase: f64,
    weekend_multiplier: f64,
}

impl UserProfile {
    fn rate(&self, t: i64, amplitude: f64) -> f64 {
        let hour = t.rem_euclid(DAY) as f64 / 3600.0;
        let weekday = (t.div_euclid(DAY) + 3).rem_euclid(7); // 1970-01-01 was a Thursday
        let weekly = if weekday >= 5 { self.weekend_multiplier } else { 1.0 };
        (1.0 + amplitude * (TAU * hour / 24.0 + self.phase).sin()) * weekly
    }

    /// Rejection-samples a timestamp from the user's intensity profile.
    fn sample_time<R: Rng>(&self, cfg: &SynthConfig, rng: &mut R) -> i64 {
        let bound = (1.0 + cfg.diurnal_amplitude) * self.weekend_multiplier.max(1.0);
        loop {
            let t = rng.random_range(cfg.start_time..cfg.end_time());
            if rng.random::<f64>() * bound < self.rate(t, cfg.diurnal_amplitude) {
                return t;
            }
        }
    }
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

fn ads_kind<R: Rng>(rng: &mut R) -> EventKind {
    let u: f64 = rng.random();
    if u < 0.55 {
        EventKind::Impression
    } else if u < 0.90 {
        EventKind::Click
    } else {
        EventKind::Conversion
    }
}

/// Generates histories, engagements, catalog and cluster labels.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_clusters = cfg.n_clusters;

    // Accounts are dealt round-robin to clusters.
    let mut cluster_accounts: Vec<Vec<u64>> = vec![Vec::new(); n_clusters];
    let mut account_cluster = BTreeMap::new();
    for a in 1..=cfg.n_accounts as u64 {
        let c = ((a - 1) as usize) % n_clusters;
        cluster_accounts[c].push(a);
        account_cluster.insert(a, c);
    }

    let mut ad_codes: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    let mut accounts = BTreeMap::new();
    for (&a, &c) in &account_cluster {
        let mut ads = Vec::with_capacity(cfg.ads_per_account);
        for j in 0..cfg.ads_per_account as u64 {
            let ad = a * 10_000 + j;
            let coarse = (c as u32 * 4 + rng.random_range(0..4)) % COARSE_CODES;
            let mid = COARSE_CODES + (a % 96) as u32;
            let fine = 160 + rng.random_range(0..96);
            ad_codes.insert(ad, vec![coarse, mid, fine]);
            ads.push(ad);
        }
        accounts.insert(a, ads);
    }
    let catalog = AdsCatalog::new(accounts).map_err(Error::Invalid)?;
    let ad_weights = WeightedIndex::new(zipf_weights(cfg.ads_per_account, 1.0))
        .expect("positive weights");
    let all_accounts: Vec<u64> = account_cluster.keys().copied().collect();

    let mut labels: Vec<usize> = (0..cfg.n_users).map(|i| i % n_clusters).collect();
    labels.shuffle(&mut rng);

    let mut histories = Vec::with_capacity(cfg.n_users);
    let mut ground_truth = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let user_id = (i + 1) as u64;
        ground_truth.insert(user_id, label);
        let region = format!("region-{:02}", rng.random_range(0..cfg.n_regions));
        let profile = UserProfile {
            phase: rng.random_range(0.0..TAU),
            weekend_multiplier: if rng.random::<bool>() { 2.0 } else { 0.5 },
        };

        let own = &cluster_accounts[label];
        let others: Vec<u64> = all_accounts
            .iter()
            .copied()
            .filter(|a| account_cluster[a] != label)
            .collect();
        let mut weights = zipf_weights(own.len(), 0.8);
        let n_fav = cfg.favorite_accounts.min(own.len());
        for idx in rand::seq::index::sample(&mut rng, own.len().max(1), n_fav) {
            weights[idx] *= cfg.favorite_boost;
        }
        let own_pick = if own.is_empty() {
            None
        } else {
            Some(WeightedIndex::new(&weights).expect("positive weights"))
        };

        let mut history = UserHistory::empty(user_id, region, cfg.n_sources());

        let n_ads = rng.random_range(cfg.ads_events.0..=cfg.ads_events.1);
        let ads_seq: &mut EventSequence = &mut history.sequences[ADS_SOURCE as usize];
        for _ in 0..n_ads {
            let timestamp = profile.sample_time(cfg, &mut rng);
            let from_own = others.is_empty() || rng.random::<f64>() < cfg.mix_ratio;
            let account = match (&own_pick, from_own) {
                (Some(pick), true) => own[pick.sample(&mut rng)],
                _ => *others.choose(&mut rng).unwrap_or(&all_accounts[0]),
            };
            let ad = catalog.ads_of(account)[ad_weights.sample(&mut rng)];
            ads_seq.events.push(Event {
                item_id: ad,
                account_id: account,
                kind: ads_kind(&mut rng),
                token_codes: ad_codes[&ad].clone(),
                timestamp,
            });
        }

        let n_content = rng.random_range(cfg.content_events.0..=cfg.content_events.1);
        let content_seq = &mut history.sequences[CONTENT_SOURCE as usize];
        for _ in 0..n_content {
            let timestamp = profile.sample_time(cfg, &mut rng);
            let topic = if n_clusters == 1 || rng.random::<f64>() < cfg.mix_ratio {
                label
            } else {
                let other = rng.random_range(0..n_clusters - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            };
            let coarse = (topic as u32 * 4 + rng.random_range(0..4)) % COARSE_CODES;
            let fine = COARSE_CODES + rng.random_range(0..64);
            let kind = if rng.random::<f64>() < 0.8 {
                EventKind::ContentView
            } else {
                EventKind::Comment
            };
            content_seq.events.push(Event {
                item_id: 1_000_000_000 + rng.random_range(0..1_000_000u64),
                account_id: NO_ACCOUNT,
                kind,
                token_codes: vec![coarse, fine],
                timestamp,
            });
        }
        for s in &mut history.sequences {
            s.sort();
        }
        histories.push(history);
    }

    let engagements = EngagementLog::from_histories(&histories);
    Ok(SynthData {
        histories,
        engagements,
        catalog,
        ground_truth,
        account_cluster,
    })
}

/// Train histories plus the click/conversion events held out from each
/// user's most recent events.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSplit {
    pub train: Vec<UserHistory>,
    pub heldout: EngagementLog,
    /// Latest timestamp kept in any train history.
    pub train_end: i64,
}

/// Holds out the last `fraction` of each user's events (all sources merged,
/// ordered by timestamp then source then position).
pub fn temporal_split(histories: &[UserHistory], fraction: f64) -> TemporalSplit {
    let mut train = Vec::with_capacity(histories.len());
    let mut heldout = EngagementLog::default();
    let mut train_end = i64::MIN;
    for h in histories {
        let mut order: Vec<(i64, usize, usize)> = h
            .sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| seq.events.iter().enumerate().map(move |(i, e)| (e.timestamp, s, i)))
            .collect();
        order.sort_unstable();
        let n_held = (order.len() as f64 * fraction).floor() as usize;
        let held: std::collections::BTreeSet<(usize, usize)> = order[order.len() - n_held..]
            .iter()
            .map(|&(_, s, i)| (s, i))
            .collect();

        let mut kept = UserHistory::empty(h.user_id, h.region.clone(), h.sequences.len());
        let mut held_eng = Vec::new();
        for (s, seq) in h.sequences.iter().enumerate() {
            kept.sequences[s].source_id = seq.source_id;
            for (i, e) in seq.events.iter().enumerate() {
                if held.contains(&(s, i)) {
                    if e.kind.is_engagement() && e.account_id != NO_ACCOUNT {
                        held_eng.push(super::Engagement {
                            ad_id: e.item_id,
                            account_id: e.account_id,
                            kind: e.kind,
                            timestamp: e.timestamp,
                        });
                    }
                } else {
                    train_end = train_end.max(e.timestamp);
                    kept.sequences[s].events.push(e.clone());
                }
            }
        }
        held_eng.sort_by_key(|e| e.timestamp);
        if !held_eng.is_empty() {
            heldout.by_user.insert(h.user_id, held_eng);
        }
        train.push(kept);
    }
    TemporalSplit {
        train,
        heldout,
        train_end,
    }
}
