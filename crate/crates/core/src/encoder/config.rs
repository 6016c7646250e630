use serde::{Deserialize, Serialize};

use crate::cfee::CfeeConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionVariant {
    /// Linear branch plus pairwise-dot branch, summed.
    SkipDot,
    /// Learned queries attending over all pooled states.
    Interaction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `K`, one parallel stack per source.
    pub n_sources: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub cfee: CfeeConfig,
    /// 1-based layer indices whose outputs feed pooling.
    pub tap_layers: Vec<usize>,
    /// `M`, compressed vectors per user.
    pub n_outputs: usize,
    pub compression: CompressionVariant,
    pub vocab_sizes: Vec<usize>,
    pub n_accounts: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

// Upper bounds keep decoders from allocating absurd tensors on hostile input.
const MAX_D_MODEL: usize = 4096;
const MAX_LAYERS: usize = 64;
const MAX_SOURCES: usize = 64;
const MAX_VOCAB: usize = 1 << 22;
const MAX_ACCOUNTS: usize = 1 << 22;
const MAX_OUTPUTS: usize = 256;
const MAX_FFN_MULT: usize = 16;

impl ModelConfig {
    /// Two sources, `d_model = 32`, two layers, four output vectors.
    pub fn toy() -> Self {
        let d_model = 32;
        let n_heads = 4;
        ModelConfig {
            n_sources: 2,
            n_layers: 2,
            d_model,
            n_heads,
            ffn_mult: 4,
            cfee: CfeeConfig::new(d_model, n_heads),
            tap_layers: vec![1, 2],
            n_outputs: 4,
            compression: CompressionVariant::SkipDot,
            vocab_sizes: vec![256, 128],
            n_accounts: 512,
            learning_rate: 0.05,
            batch_size: 64,
            temperature: 0.07,
            seed: 7,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Number of pooled matrices entering compression: `K × |tap_layers|`.
    pub fn n_tapped(&self) -> usize {
        self.n_sources * self.tap_layers.len()
    }

    /// Highest tapped layer; layers above it never influence the output.
    pub fn max_tap(&self) -> usize {
        self.tap_layers.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bounded = [
            ("n_sources", self.n_sources, MAX_SOURCES),
            ("n_layers", self.n_layers, MAX_LAYERS),
            ("d_model", self.d_model, MAX_D_MODEL),
            ("n_outputs", self.n_outputs, MAX_OUTPUTS),
            ("ffn_mult", self.ffn_mult, MAX_FFN_MULT),
            ("n_accounts", self.n_accounts, MAX_ACCOUNTS),
        ];
        for (field, v, max) in bounded {
            if v < 1 || v > max {
                return Err(Error::config(field, format!("must lie in [1, {max}]")));
            }
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("n_heads", "must divide d_model"));
        }
        if self.cfee.d_model != self.d_model || self.cfee.n_heads != self.n_heads {
            return Err(Error::config("cfee", "d_model and n_heads must match the model"));
        }
        self.cfee.validate()?;
        if self.cfee.relpos_window > 1 << 16 || self.cfee.n_time_buckets > 1 << 10 {
            return Err(Error::config("cfee", "tables too large"));
        }
        if self.tap_layers.is_empty() || self.tap_layers.iter().any(|&l| l < 1 || l > self.n_layers) {
            return Err(Error::config("tap_layers", "must be a non-empty subset of [1, n_layers]"));
        }
        let mut sorted = self.tap_layers.clone();
        sorted.dedup();
        if sorted.len() != self.tap_layers.len() || !sorted.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("tap_layers", "must be strictly increasing"));
        }
        if self.vocab_sizes.len() != self.n_sources {
            return Err(Error::config("vocab_sizes", "need one entry per source"));
        }
        if self.vocab_sizes.iter().any(|&v| v < 1 || v > MAX_VOCAB) {
            return Err(Error::config("vocab_sizes", format!("entries must lie in [1, {MAX_VOCAB}]")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "in-batch negatives need at least 2"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        Ok(())
    }
}
