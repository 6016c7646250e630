//! The single run configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfee::CfeeConfig;
use crate::encoder::{CompressionVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::event_model::SynthConfig;
use crate::graph::GraphConfig;
use crate::pipeline::RefreshPolicy;
use crate::retrieval::RetrievalConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    /// Fraction of each user's latest events held out for evaluation.
    pub heldout_fraction: f64,
    /// Examples used to measure loss before and after training.
    pub eval_examples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 300,
            heldout_fraction: 0.1,
            eval_examples: 1024,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::config("train.heldout_fraction", "must lie in (0, 1)"));
        }
        if self.eval_examples < 2 {
            return Err(Error::config("train.eval_examples", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub snapshot_store: PathBuf,
    pub graph: PathBuf,
    pub candidates: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "alure-out/data".into(),
            checkpoint: "alure-out/model.alckpt".into(),
            snapshot_store: "alure-out/snapshots".into(),
            graph: "alure-out/graph.jsonl".into(),
            candidates: "alure-out/candidates.jsonl".into(),
            report: "alure-out/report.json".into(),
        }
    }
}

impl Paths {
    /// Every path re-rooted under `root`.
    pub fn under(root: &Path) -> Self {
        Paths {
            data_dir: root.join("data"),
            checkpoint: root.join("model.alckpt"),
            snapshot_store: root.join("snapshots"),
            graph: root.join("graph.jsonl"),
            candidates: root.join("candidates.jsonl"),
            report: root.join("report.json"),
        }
    }

    pub fn histories(&self) -> PathBuf {
        self.data_dir.join("histories.jsonl")
    }

    pub fn engagements(&self) -> PathBuf {
        self.data_dir.join("engagements.jsonl")
    }

    pub fn catalog(&self) -> PathBuf {
        self.data_dir.join("catalog.jsonl")
    }

    pub fn ground_truth(&self) -> PathBuf {
        self.data_dir.join("ground_truth.jsonl")
    }

    pub fn heldout(&self) -> PathBuf {
        self.data_dir.join("heldout.jsonl")
    }
}

/// Model used for the synthetic experiment: small enough to train on one
/// core in seconds.
pub fn experiment_model() -> ModelConfig {
    let d_model = 16;
    let n_heads = 2;
    ModelConfig {
        n_sources: 2,
        n_layers: 2,
        d_model,
        n_heads,
        ffn_mult: 2,
        cfee: CfeeConfig::new(d_model, n_heads),
        tap_layers: vec![1, 2],
        n_outputs: 4,
        compression: CompressionVariant::SkipDot,
        vocab_sizes: SynthConfig::default().vocab_sizes(),
        n_accounts: 512,
        learning_rate: 0.2,
        batch_size: 64,
        temperature: 0.07,
        seed: 7,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every sub-config seed; see [`RunConfig::resolved`].
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub graph: GraphConfig,
    pub retrieval: RetrievalConfig,
    pub refresh: RefreshPolicy,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            synth: SynthConfig::default(),
            model: experiment_model(),
            train: TrainSettings::default(),
            graph: GraphConfig::default(),
            retrieval: RetrievalConfig::default(),
            refresh: RefreshPolicy::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Defaults shrunk for a desk: `k1 = 40`, `k1' = 5`, `k2 = 15`, 10k users.
    pub fn desk_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.apply_desk_scale();
        cfg
    }

    pub fn apply_desk_scale(&mut self) {
        let desk = GraphConfig::desk_scale();
        self.graph.k1 = desk.k1;
        self.graph.k1_prime = desk.k1_prime;
        self.graph.k2 = desk.k2;
        self.synth.n_users = 10_000;
    }

    /// Propagates the top-level seed into every stage.
    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.graph.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.graph.validate()?;
        self.retrieval.validate()?;
        self.refresh.validate()?;
        if self.model.n_sources != self.synth.n_sources() {
            return Err(Error::config("model.n_sources", "must match the number of synthetic sources"));
        }
        if self.model.vocab_sizes != self.synth.vocab_sizes() {
            return Err(Error::config("model.vocab_sizes", "must match the synthetic vocabularies"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form with paths excluded, hex.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}
