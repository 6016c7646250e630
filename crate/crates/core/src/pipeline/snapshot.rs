//! Immutable embedding snapshots and their binary format.
//!
//! ```text
//! "ALURESNAP"                       9 bytes
//! format version                    u32 LE
//! snapshot_version                  u64 LE
//! model_version                     u64 LE
//! created_at                        i64 LE
//! M, d_model                        u32 LE each
//! region count                      u32 LE
//! per region (ascending name):      u64 name length, UTF-8 name,
//!                                   u64 member count, member ids (u64 LE)
//! record count                      u64 LE
//! per record (ascending user_id):   u64 user_id, M·d_model f64 LE
//! CRC32 of all preceding bytes      u32 LE
//! ```

use std::collections::{BTreeMap, BTreeSet};

use crate::codec::{put_f64s, put_i64, put_u32, put_u64, seal, unseal, Reader};
use crate::encoder::UserEmbedding;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const SNAPSHOT_MAGIC: &[u8] = b"ALURESNAP";
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

const MAX_DIM: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSnapshot {
    pub snapshot_version: u64,
    pub model_version: u64,
    pub created_at: i64,
    pub n_outputs: usize,
    pub d_model: usize,
    pub records: BTreeMap<u64, UserEmbedding>,
    pub region_index: BTreeMap<String, Vec<u64>>,
}

impl EmbeddingSnapshot {
    /// Assembles a snapshot, stamping versions into every record.
    pub fn new(
        snapshot_version: u64,
        model_version: u64,
        created_at: i64,
        n_outputs: usize,
        d_model: usize,
        embeddings: Vec<(String, UserEmbedding)>,
    ) -> Result<Self> {
        let mut records = BTreeMap::new();
        let mut region_index: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for (region, mut e) in embeddings {
            if e.vectors.rows != n_outputs || e.vectors.cols != d_model {
                return Err(Error::Invalid(format!(
                    "user {}: embedding is {}×{}, snapshot is {n_outputs}×{d_model}",
                    e.user_id, e.vectors.rows, e.vectors.cols
                )));
            }
            if !e.vectors.all_finite() {
                return Err(Error::Invalid(format!("user {}: non-finite embedding", e.user_id)));
            }
            e.model_version = model_version;
            e.snapshot_version = snapshot_version;
            region_index.entry(region).or_default().push(e.user_id);
            if records.insert(e.user_id, e).is_some() {
                return Err(Error::Invalid("duplicate user in snapshot".into()));
            }
        }
        for ids in region_index.values_mut() {
            ids.sort_unstable();
        }
        Ok(EmbeddingSnapshot {
            snapshot_version,
            model_version,
            created_at,
            n_outputs,
            d_model,
            records,
            region_index,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, user_id: u64) -> Option<&UserEmbedding> {
        self.records.get(&user_id)
    }

    pub fn region_of(&self, user_id: u64) -> Option<&str> {
        self.region_index
            .iter()
            .find(|(_, ids)| ids.binary_search(&user_id).is_ok())
            .map(|(r, _)| r.as_str())
    }

    /// The region index and records only, without version metadata; equal
    /// inputs and model give equal bytes regardless of when they ran.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.put_content(&mut out);
        out
    }

    fn put_content(&self, out: &mut Vec<u8>) {
        put_u32(out, self.n_outputs as u32);
        put_u32(out, self.d_model as u32);
        put_u32(out, self.region_index.len() as u32);
        for (region, ids) in &self.region_index {
            put_u64(out, region.len() as u64);
            out.extend_from_slice(region.as_bytes());
            put_u64(out, ids.len() as u64);
            for &id in ids {
                put_u64(out, id);
            }
        }
        put_u64(out, self.records.len() as u64);
        for (&id, e) in &self.records {
            put_u64(out, id);
            put_f64s(out, &e.vectors.data);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.records.len() * (8 + 8 * self.n_outputs * self.d_model));
        out.extend_from_slice(SNAPSHOT_MAGIC);
        put_u32(&mut out, SNAPSHOT_FORMAT_VERSION);
        put_u64(&mut out, self.snapshot_version);
        put_u64(&mut out, self.model_version);
        put_i64(&mut out, self.created_at);
        self.put_content(&mut out);
        seal(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let body = unseal(bytes, SNAPSHOT_MAGIC, "ALURESNAP")?;
        let mut r = Reader::new(body);
        let version = r.u32()?;
        if version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SNAPSHOT_FORMAT_VERSION,
            });
        }
        let snapshot_version = r.u64()?;
        let model_version = r.u64()?;
        let created_at = r.i64()?;
        let m = r.u32()?;
        let d = r.u32()?;
        if m == 0 || d == 0 || m > MAX_DIM || d > MAX_DIM {
            return Err(Error::Format(format!("bad embedding shape {m}×{d}")));
        }
        let (m, d) = (m as usize, d as usize);

        let n_regions = r.u32()? as usize;
        let mut region_index = BTreeMap::new();
        let mut seen = BTreeSet::new();
        let mut prev: Option<String> = None;
        for _ in 0..n_regions {
            let len = r.len_prefix(1)?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("region name is not UTF-8".into()))?
                .to_string();
            if prev.as_ref().is_some_and(|p| *p >= name) {
                return Err(Error::Format("regions not in ascending order".into()));
            }
            let n = r.len_prefix(8)?;
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u64()?;
                if ids.last().is_some_and(|&last| last >= id) || !seen.insert(id) {
                    return Err(Error::Format(format!("region member {id} out of order or repeated")));
                }
                ids.push(id);
            }
            prev = Some(name.clone());
            region_index.insert(name, ids);
        }

        let record_size = 8 + 8 * m * d;
        let n_records = r.len_prefix(record_size)?;
        let mut records = BTreeMap::new();
        for _ in 0..n_records {
            let user_id = r.u64()?;
            if records.keys().next_back().is_some_and(|&last| last >= user_id) {
                return Err(Error::Format("records not in ascending user order".into()));
            }
            let data = r.f64s(m * d)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("user {user_id}: non-finite embedding")));
            }
            records.insert(
                user_id,
                UserEmbedding {
                    user_id,
                    vectors: Mat::from_vec(m, d, data),
                    model_version,
                    snapshot_version,
                },
            );
        }
        r.finish()?;
        if seen.len() != records.len() || !seen.iter().all(|id| records.contains_key(id)) {
            return Err(Error::Format("region index does not match records".into()));
        }
        Ok(EmbeddingSnapshot {
            snapshot_version,
            model_version,
            created_at,
            n_outputs: m,
            d_model: d,
            records,
            region_index,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(id: u64, seed: f64) -> UserEmbedding {
        UserEmbedding {
            user_id: id,
            vectors: Mat::from_vec(2, 3, (0..6).map(|i| seed + i as f64 * 0.25).collect()),
            model_version: 0,
            snapshot_version: 0,
        }
    }

    fn sample() -> EmbeddingSnapshot {
        EmbeddingSnapshot::new(
            4,
            99,
            1_700_000_000,
            2,
            3,
            vec![("us".into(), emb(9, 1.0)), ("br".into(), emb(2, -1.0)), ("us".into(), emb(5, 0.5))],
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let s = sample();
        assert_eq!(s.region_index["us"], vec![5, 9]);
        assert_eq!(s.get(9).unwrap().snapshot_version, 4);
        let bytes = s.encode();
        let back = EmbeddingSnapshot::decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.region_of(2), Some("br"));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().encode();
        assert!(matches!(EmbeddingSnapshot::decode(&bytes[..bytes.len() - 3]), Err(Error::Checksum)));
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(EmbeddingSnapshot::decode(&flipped), Err(Error::Checksum)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bad = UserEmbedding {
            vectors: Mat::zeros(1, 3),
            ..emb(1, 0.0)
        };
        assert!(EmbeddingSnapshot::new(1, 1, 1, 2, 3, vec![("x".into(), bad)]).is_err());
    }
}
