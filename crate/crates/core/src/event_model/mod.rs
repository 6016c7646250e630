//! Multimodal timestamped event sequences, engagement logs and the ads catalog.

mod io;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{
    ingest_histories, parse_catalog_line, parse_engagement_line, parse_history_line,
    read_catalog, read_engagements, read_ground_truth, read_histories, write_catalog,
    write_engagements, write_ground_truth, write_histories, Ingested,
};
pub use synth::{synth_generate, temporal_split, SynthConfig, SynthData, TemporalSplit};

/// `account_id` value meaning "no advertiser" (content views, comments).
pub const NO_ACCOUNT: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Impression,
    Click,
    Conversion,
    ContentView,
    Comment,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::Impression,
        EventKind::Click,
        EventKind::Conversion,
        EventKind::ContentView,
        EventKind::Comment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Click or conversion: the kinds recorded in an [`EngagementLog`].
    pub fn is_engagement(self) -> bool {
        matches!(self, EventKind::Click | EventKind::Conversion)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Impression => "impression",
            EventKind::Click => "click",
            EventKind::Conversion => "conversion",
            EventKind::ContentView => "content_view",
            EventKind::Comment => "comment",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown event kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub item_id: u64,
    /// [`NO_ACCOUNT`] when the event has no advertiser.
    pub account_id: u64,
    pub kind: EventKind,
    /// Pre-tokenized content codes; may be empty.
    pub token_codes: Vec<u32>,
    /// Seconds since epoch, always positive.
    pub timestamp: i64,
}

/// One user's history for one source, sorted by timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventSequence {
    pub user_id: u64,
    pub source_id: u32,
    pub events: Vec<Event>,
}

impl EventSequence {
    pub fn is_sorted(&self) -> bool {
        self.events
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp)
    }

    /// Stable sort by timestamp. Returns true if the order changed.
    pub fn sort(&mut self) -> bool {
        if self.is_sorted() {
            return false;
        }
        self.events.sort_by_key(|e| e.timestamp);
        true
    }
}

/// All `K` source sequences for one user, indexed by `source_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: u64,
    pub region: String,
    pub sequences: Vec<EventSequence>,
}

impl UserHistory {
    pub fn empty(user_id: u64, region: impl Into<String>, n_sources: usize) -> Self {
        UserHistory {
            user_id,
            region: region.into(),
            sequences: (0..n_sources as u32)
                .map(|source_id| EventSequence {
                    user_id,
                    source_id,
                    events: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn n_events(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_events() == 0
    }

    pub fn max_timestamp(&self) -> Option<i64> {
        self.sequences
            .iter()
            .filter_map(|s| s.events.last().map(|e| e.timestamp))
            .max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Engagement {
    pub ad_id: u64,
    pub account_id: u64,
    pub kind: EventKind,
    pub timestamp: i64,
}

/// Per-user click and conversion history, each list sorted by timestamp.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngagementLog {
    pub by_user: BTreeMap<u64, Vec<Engagement>>,
}

impl EngagementLog {
    /// Collects click/conversion events from every source of every history.
    pub fn from_histories(histories: &[UserHistory]) -> Self {
        let mut by_user = BTreeMap::new();
        for h in histories {
            let mut list: Vec<Engagement> = h
                .sequences
                .iter()
                .flat_map(|s| &s.events)
                .filter(|e| e.kind.is_engagement() && e.account_id != NO_ACCOUNT)
                .map(|e| Engagement {
                    ad_id: e.item_id,
                    account_id: e.account_id,
                    kind: e.kind,
                    timestamp: e.timestamp,
                })
                .collect();
            list.sort_by_key(|e| e.timestamp);
            if !list.is_empty() {
                by_user.insert(h.user_id, list);
            }
        }
        EngagementLog { by_user }
    }

    pub fn get(&self, user: u64) -> &[Engagement] {
        self.by_user.get(&user).map_or(&[], Vec::as_slice)
    }

    pub fn n_engagements(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }
}

/// Ads grouped under their owning account.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdsCatalog {
    accounts: BTreeMap<u64, Vec<u64>>,
    ad_account: BTreeMap<u64, u64>,
}

impl AdsCatalog {
    /// Fails if an ad appears under more than one account.
    pub fn new(accounts: BTreeMap<u64, Vec<u64>>) -> Result<Self, String> {
        let mut ad_account = BTreeMap::new();
        for (&account, ads) in &accounts {
            for &ad in ads {
                if let Some(prev) = ad_account.insert(ad, account) {
                    return Err(format!(
                        "ad {ad} listed under accounts {prev} and {account}"
                    ));
                }
            }
        }
        Ok(AdsCatalog {
            accounts,
            ad_account,
        })
    }

    pub fn ads_of(&self, account: u64) -> &[u64] {
        self.accounts.get(&account).map_or(&[], Vec::as_slice)
    }

    pub fn account_of(&self, ad: u64) -> Option<u64> {
        self.ad_account.get(&ad).copied()
    }

    pub fn accounts(&self) -> &BTreeMap<u64, Vec<u64>> {
        &self.accounts
    }

    /// All ad ids in ascending order.
    pub fn all_ads(&self) -> impl Iterator<Item = u64> + '_ {
        self.ad_account.keys().copied()
    }

    pub fn n_ads(&self) -> usize {
        self.ad_account.len()
    }
}
