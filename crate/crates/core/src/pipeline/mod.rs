//! Asynchronous embedding production: extract the embedding subgraph from a
//! checkpoint, evaluate histories in bulk, publish versioned snapshots.

mod scheduler;
mod snapshot;
mod store;

use std::path::Path;

pub use scheduler::{Clock, HistorySource, ManualClock, RefreshPolicy, Scheduler, SchedulerEvent, SystemClock};
pub use snapshot::{EmbeddingSnapshot, SNAPSHOT_FORMAT_VERSION, SNAPSHOT_MAGIC};
pub use store::{snapshot_file_name, SnapshotStore, CURRENT_FILE, DEFAULT_RETAIN};

use crate::encoder::{checkpoint_id, decode_checkpoint, forward_user, EncoderParams, ModelConfig, UserEmbedding};
use crate::error::{Error, Result};
use crate::event_model::UserHistory;
use crate::parallel::par_map;

/// The parameters reachable from `forward_user` and nothing else: no account
/// table, no training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    config: ModelConfig,
    params: EncoderParams,
    model_version: u64,
}

impl Embedder {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn embed(&self, history: &UserHistory) -> Result<UserEmbedding> {
        let mut e = forward_user(&self.params, &self.config, history)?;
        e.model_version = self.model_version;
        Ok(e)
    }
}

/// Builds an [`Embedder`] from encoded checkpoint bytes.
pub fn extract_feature_arch(checkpoint: &[u8]) -> Result<Embedder> {
    let (params, config) = decode_checkpoint(checkpoint)?;
    Ok(Embedder {
        config,
        params: params.encoder,
        model_version: checkpoint_id(checkpoint),
    })
}

pub fn load_embedder(path: &Path) -> Result<Embedder> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    extract_feature_arch(&bytes)
}

/// Embeds every history; failures are counted, not fatal.
pub fn build_snapshot(
    embedder: &Embedder,
    histories: &[UserHistory],
    snapshot_version: u64,
    created_at: i64,
) -> Result<(EmbeddingSnapshot, usize)> {
    if histories.is_empty() {
        return Err(Error::Invalid("refresh needs at least one history".into()));
    }
    let results = par_map(histories, |h| embedder.embed(h).map(|e| (h.region.clone(), e)));
    let mut ok = Vec::with_capacity(results.len());
    let mut skipped = 0;
    for (h, r) in histories.iter().zip(results) {
        match r {
            Ok(pair) => ok.push(pair),
            Err(e) => {
                log::debug!("skipping user {}: {e}", h.user_id);
                skipped += 1;
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::NoEmbeddings { skipped });
    }
    if skipped > 0 {
        log::warn!("{skipped} users skipped during refresh");
    }
    let cfg = embedder.config();
    let snap = EmbeddingSnapshot::new(
        snapshot_version,
        embedder.model_version(),
        created_at,
        cfg.n_outputs,
        cfg.d_model,
        ok,
    )?;
    Ok((snap, skipped))
}

#[derive(Debug, Clone)]
pub struct RefreshOutcome {
    pub snapshot: std::sync::Arc<EmbeddingSnapshot>,
    pub skipped: usize,
}

/// Evaluates all histories and publishes the result as the next version.
pub fn refresh(store: &SnapshotStore, embedder: &Embedder, histories: &[UserHistory], now: i64) -> Result<RefreshOutcome> {
    let version = store.latest_version() + 1;
    let (snap, skipped) = build_snapshot(embedder, histories, version, now)?;
    let snapshot = store.publish(snap)?;
    log::info!(
        "published snapshot {} ({} users, {skipped} skipped)",
        snapshot.snapshot_version,
        snapshot.len()
    );
    Ok(RefreshOutcome { snapshot, skipped })
}
