//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use alure::cfee::CfeeConfig;
use alure::encoder::{BatchEntry, CompressionVariant, EventToken, ModelConfig, ModelParams, SequenceInput};
use alure::event_model::EventKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `d_model = 8`, two heads, one layer, two sources.
pub fn gradcheck_config(variant: CompressionVariant, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.ffn_mult = 2;
    cfg.cfee = CfeeConfig::new(8, 2);
    cfg.cfee.relpos_window = 3;
    cfg.cfee.n_time_buckets = 6;
    cfg.tap_layers = vec![1];
    cfg.n_outputs = 3;
    cfg.compression = variant;
    cfg.vocab_sizes = vec![12, 9];
    cfg.n_accounts = 6;
    cfg.temperature = 0.5;
    cfg.seed = seed;
    cfg
}

/// Random sequence of `len` events; codes are drawn below `vocab`.
pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, vocab: usize, t0: i64) -> SequenceInput {
    let mut t = t0;
    let mut tokens = Vec::with_capacity(len);
    let mut timestamps = Vec::with_capacity(len);
    for _ in 0..len {
        let kind = EventKind::ALL[rng.random_range(0..EventKind::ALL.len())];
        let n_codes = rng.random_range(0..4);
        let codes = (0..n_codes).map(|_| rng.random_range(0..vocab as u32)).collect();
        tokens.push(EventToken { kind, codes });
        timestamps.push(t);
        t += rng.random_range(0..20_000);
    }
    SequenceInput::new(tokens, timestamps).unwrap()
}

/// Random user inputs with at least one non-empty source.
pub fn random_inputs(rng: &mut ChaCha8Rng, cfg: &ModelConfig, max_len: usize) -> Vec<SequenceInput> {
    loop {
        let inputs: Vec<SequenceInput> = cfg
            .vocab_sizes
            .iter()
            .map(|&v| {
                let len = rng.random_range(0..=max_len);
                let t0 = rng.random_range(1_700_000_000..1_700_100_000);
                random_sequence(rng, len, v, t0)
            })
            .collect();
        if inputs.iter().any(|s| !s.is_empty()) {
            return inputs;
        }
    }
}

pub fn random_entries(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize, max_len: usize) -> Vec<BatchEntry> {
    (0..n)
        .map(|u| BatchEntry {
            user_id: u as u64 + 1,
            sources: random_inputs(rng, cfg, max_len),
            positive_account: rng.random_range(1..=cfg.n_accounts as u64 * 2),
        })
        .collect()
}

/// Initialized parameters with every tensor jittered, so that no parameter
/// (gains, biases, zero tables) sits at a special value.
pub fn jittered_params(cfg: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    p
}

pub mod criteria;
pub mod oracles;
