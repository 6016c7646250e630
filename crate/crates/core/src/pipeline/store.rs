//! Directory-backed snapshot store with atomic publication.
//!
//! Each snapshot is an immutable `snapshot-NNNNNNNN.alsnap` file. The
//! `CURRENT` file names the active one and is replaced by rename, so a crash
//! leaves either the old or the new pointer. In memory, readers clone an
//! `Arc` and keep the snapshot they got for as long as they like.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::snapshot::EmbeddingSnapshot;
use crate::error::{Error, Result};

pub const CURRENT_FILE: &str = "CURRENT";
pub const DEFAULT_RETAIN: usize = 3;

pub fn snapshot_file_name(version: u64) -> String {
    format!("snapshot-{version:08}.alsnap")
}

fn parse_file_name(name: &str) -> Option<u64> {
    name.strip_prefix("snapshot-")?.strip_suffix(".alsnap")?.parse().ok()
}

#[derive(Debug)]
pub struct SnapshotStore {
    dir: PathBuf,
    retain: usize,
    current: RwLock<Option<Arc<EmbeddingSnapshot>>>,
    writer: Mutex<()>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl SnapshotStore {
    /// Opens (creating if needed) a store and loads its current snapshot.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pointer = dir.join(CURRENT_FILE);
        let current = if pointer.exists() {
            let name = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
            let name = name.trim();
            if parse_file_name(name).is_none() {
                return Err(Error::Format(format!("CURRENT names `{name}`, not a snapshot file")));
            }
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Some(Arc::new(EmbeddingSnapshot::decode(&bytes)?))
        } else {
            None
        };
        Ok(SnapshotStore {
            dir,
            retain: DEFAULT_RETAIN,
            current: RwLock::new(current),
            writer: Mutex::new(()),
        })
    }

    pub fn with_retention(mut self, retain: usize) -> Self {
        self.retain = retain.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn current(&self) -> Option<Arc<EmbeddingSnapshot>> {
        self.current.read().clone()
    }

    /// Version of the active snapshot, 0 if none was ever published.
    pub fn latest_version(&self) -> u64 {
        self.current.read().as_ref().map_or(0, |s| s.snapshot_version)
    }

    /// Versions of the snapshot files on disk, ascending.
    pub fn versions_on_disk(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            if let Some(v) = entry.file_name().to_str().and_then(parse_file_name) {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    pub fn path_of(&self, version: u64) -> PathBuf {
        self.dir.join(snapshot_file_name(version))
    }

    /// Writes the snapshot file, swaps the pointer, then prunes old files.
    pub fn publish(&self, snapshot: EmbeddingSnapshot) -> Result<Arc<EmbeddingSnapshot>> {
        let _guard = self.writer.lock();
        let latest = self.latest_version();
        if snapshot.snapshot_version <= latest {
            return Err(Error::Invalid(format!(
                "snapshot version {} is not newer than {latest}",
                snapshot.snapshot_version
            )));
        }
        let name = snapshot_file_name(snapshot.snapshot_version);
        write_atomic(&self.dir.join(&name), &snapshot.encode())?;
        write_atomic(&self.dir.join(CURRENT_FILE), format!("{name}\n").as_bytes())?;
        let snapshot = Arc::new(snapshot);
        *self.current.write() = Some(Arc::clone(&snapshot));
        self.prune()?;
        Ok(snapshot)
    }

    fn prune(&self) -> Result<()> {
        let versions = self.versions_on_disk()?;
        let excess = versions.len().saturating_sub(self.retain);
        for v in &versions[..excess] {
            let path = self.path_of(*v);
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
