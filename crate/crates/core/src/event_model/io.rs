//! Line-delimited JSON readers and writers.
//!
//! History line:
//! `{"user_id": u64, "region": str, "sequences": [{"source_id": u32, "events": [{"item_id": u64, "account_id": u64, "kind": str, "tokens": [u32], "ts": i64}]}]}`
//!
//! Engagement line: `{"user_id": u64, "engagements": [{"ad": u64, "account": u64, "kind": "click"|"conversion", "ts": i64}]}`
//!
//! Catalog line: `{"account_id": u64, "ads": [u64]}`
//!
//! Ground-truth line: `{"user_id": u64, "cluster": usize}`

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{AdsCatalog, Engagement, EngagementLog, Event, EventKind, EventSequence, UserHistory};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEvent {
    item_id: u64,
    account_id: u64,
    kind: EventKind,
    tokens: Vec<u32>,
    ts: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireSequence {
    source_id: u32,
    events: Vec<WireEvent>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireHistory {
    user_id: u64,
    region: String,
    sequences: Vec<WireSequence>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEngagement {
    ad: u64,
    account: u64,
    kind: EventKind,
    ts: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEngagementLine {
    user_id: u64,
    engagements: Vec<WireEngagement>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCatalogLine {
    account_id: u64,
    ads: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLabel {
    user_id: u64,
    cluster: usize,
}

/// Parsed histories plus the number of sequences that arrived unsorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ingested {
    pub histories: Vec<UserHistory>,
    pub unsorted_sequences: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses one history line. Returns the history and whether any of its
/// sequences had to be sorted. Missing sources become empty sequences.
pub fn parse_history_line(line: &str, line_no: usize, n_sources: usize) -> Result<(UserHistory, usize)> {
    let wire: WireHistory =
        serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
    let mut slots: Vec<Option<EventSequence>> = vec![None; n_sources];
    let mut resorted = 0;
    for seq in wire.sequences {
        let sid = seq.source_id as usize;
        if sid >= n_sources {
            return Err(parse_err(
                line_no,
                format!("source_id {sid} out of range (K = {n_sources})"),
            ));
        }
        if slots[sid].is_some() {
            return Err(parse_err(line_no, format!("duplicate source_id {sid}")));
        }
        let mut events = Vec::with_capacity(seq.events.len());
        for e in seq.events {
            if e.ts <= 0 {
                return Err(parse_err(
                    line_no,
                    format!("non-positive timestamp {}", e.ts),
                ));
            }
            events.push(Event {
                item_id: e.item_id,
                account_id: e.account_id,
                kind: e.kind,
                token_codes: e.tokens,
                timestamp: e.ts,
            });
        }
        let mut s = EventSequence {
            user_id: wire.user_id,
            source_id: seq.source_id,
            events,
        };
        if s.sort() {
            resorted += 1;
        }
        slots[sid] = Some(s);
    }
    let sequences = slots
        .into_iter()
        .enumerate()
        .map(|(sid, s)| {
            s.unwrap_or(EventSequence {
                user_id: wire.user_id,
                source_id: sid as u32,
                events: Vec::new(),
            })
        })
        .collect();
    Ok((
        UserHistory {
            user_id: wire.user_id,
            region: wire.region,
            sequences,
        },
        resorted,
    ))
}

fn lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader.lines().enumerate().map(|(i, l)| (i + 1, l))
}

pub fn read_histories<R: BufRead>(reader: R, n_sources: usize) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (line_no, line) in lines(reader) {
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (h, resorted) = parse_history_line(&line, line_no, n_sources)?;
        if resorted > 0 {
            warn!("line {line_no}: user {} had {resorted} unsorted sequence(s)", h.user_id);
        }
        out.unsorted_sequences += resorted;
        out.histories.push(h);
    }
    Ok(out)
}

pub fn ingest_histories(path: &Path, n_sources: usize) -> Result<Ingested> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_histories(BufReader::new(f), n_sources)
}

pub fn write_histories<W: Write>(mut w: W, histories: &[UserHistory]) -> Result<()> {
    for h in histories {
        let wire = WireHistory {
            user_id: h.user_id,
            region: h.region.clone(),
            sequences: h
                .sequences
                .iter()
                .map(|s| WireSequence {
                    source_id: s.source_id,
                    events: s
                        .events
                        .iter()
                        .map(|e| WireEvent {
                            item_id: e.item_id,
                            account_id: e.account_id,
                            kind: e.kind,
                            tokens: e.token_codes.clone(),
                            ts: e.timestamp,
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn parse_engagement_line(line: &str, line_no: usize) -> Result<(u64, Vec<Engagement>)> {
    let wire: WireEngagementLine =
        serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
    let mut list = Vec::with_capacity(wire.engagements.len());
    for e in wire.engagements {
        if !e.kind.is_engagement() {
            return Err(parse_err(
                line_no,
                format!("engagement kind must be click or conversion, got {}", e.kind.as_str()),
            ));
        }
        if e.ts <= 0 {
            return Err(parse_err(line_no, format!("non-positive timestamp {}", e.ts)));
        }
        list.push(Engagement {
            ad_id: e.ad,
            account_id: e.account,
            kind: e.kind,
            timestamp: e.ts,
        });
    }
    list.sort_by_key(|e| e.timestamp);
    Ok((wire.user_id, list))
}

pub fn read_engagements<R: BufRead>(reader: R) -> Result<EngagementLog> {
    let mut log = EngagementLog::default();
    for (line_no, line) in lines(reader) {
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (user, list) = parse_engagement_line(&line, line_no)?;
        if log.by_user.insert(user, list).is_some() {
            return Err(parse_err(line_no, format!("duplicate user {user}")));
        }
    }
    Ok(log)
}

pub fn write_engagements<W: Write>(mut w: W, log: &EngagementLog) -> Result<()> {
    for (&user_id, list) in &log.by_user {
        let wire = WireEngagementLine {
            user_id,
            engagements: list
                .iter()
                .map(|e| WireEngagement {
                    ad: e.ad_id,
                    account: e.account_id,
                    kind: e.kind,
                    ts: e.timestamp,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn parse_catalog_line(line: &str, line_no: usize) -> Result<(u64, Vec<u64>)> {
    let wire: WireCatalogLine =
        serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
    Ok((wire.account_id, wire.ads))
}

pub fn read_catalog<R: BufRead>(reader: R) -> Result<AdsCatalog> {
    let mut accounts = BTreeMap::new();
    let mut last_line = 0;
    for (line_no, line) in lines(reader) {
        last_line = line_no;
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (account, ads) = parse_catalog_line(&line, line_no)?;
        if accounts.insert(account, ads).is_some() {
            return Err(parse_err(line_no, format!("duplicate account {account}")));
        }
    }
    AdsCatalog::new(accounts).map_err(|m| parse_err(last_line, m))
}

pub fn write_catalog<W: Write>(mut w: W, catalog: &AdsCatalog) -> Result<()> {
    for (&account_id, ads) in catalog.accounts() {
        let wire = WireCatalogLine {
            account_id,
            ads: ads.clone(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn read_ground_truth<R: BufRead>(reader: R) -> Result<BTreeMap<u64, usize>> {
    let mut out = BTreeMap::new();
    for (line_no, line) in lines(reader) {
        let line = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireLabel =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        out.insert(wire.user_id, wire.cluster);
    }
    Ok(out)
}

pub fn write_ground_truth<W: Write>(mut w: W, labels: &BTreeMap<u64, usize>) -> Result<()> {
    for (&user_id, &cluster) in labels {
        serde_json::to_writer(&mut w, &WireLabel { user_id, cluster })?;
        writeln!(w).map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}
