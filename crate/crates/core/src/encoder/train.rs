//! In-batch InfoNCE on next-engaged-account prediction, trained with plain SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::forward::{backward_inputs, forward_inputs, SequenceInput, UserForward};
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::event_model::{UserHistory, NO_ACCOUNT};
use crate::tensor::{dot, Mat};

/// One training user: encoder inputs plus the account it engaged next.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEntry {
    pub user_id: u64,
    pub sources: Vec<SequenceInput>,
    pub positive_account: u64,
}

/// Heterogeneous-length users; nothing is padded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RaggedBatch {
    pub entries: Vec<BatchEntry>,
}

/// Builds a training example: the positive is the account of the latest
/// click/conversion, and every event at or after that moment is removed
/// from the input. Returns `None` when no engagement exists or nothing
/// would remain.
pub fn training_example(history: &UserHistory, n_sources: usize) -> Option<BatchEntry> {
    let target = history
        .sequences
        .iter()
        .flat_map(|s| &s.events)
        .filter(|e| e.kind.is_engagement() && e.account_id != NO_ACCOUNT)
        .max_by_key(|e| e.timestamp)?;
    let cutoff = target.timestamp;
    let mut sources = vec![SequenceInput::default(); n_sources];
    for seq in &history.sequences {
        let s = seq.source_id as usize;
        if s < n_sources {
            sources[s] = SequenceInput::from_events(seq.events.iter().filter(|e| e.timestamp < cutoff));
        }
    }
    if sources.iter().all(SequenceInput::is_empty) {
        return None;
    }
    Some(BatchEntry {
        user_id: history.user_id,
        sources,
        positive_account: target.account_id,
    })
}

pub fn training_examples(histories: &[UserHistory], n_sources: usize) -> Vec<BatchEntry> {
    histories
        .iter()
        .filter_map(|h| training_example(h, n_sources))
        .collect()
}

/// Row of the account table used for `account_id`.
pub fn account_row(account_id: u64, n_accounts: usize) -> usize {
    (account_id % n_accounts as u64) as usize
}

#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    /// Gradient w.r.t. each un-normalized user vector.
    pub d_users: Vec<Vec<f64>>,
    /// Gradient w.r.t. each un-normalized positive account vector.
    pub d_positives: Vec<Vec<f64>>,
}

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = dot(v, v).sqrt();
    (v.iter().map(|x| x / n).collect(), n)
}

/// Backprop through `e = v / ‖v‖`.
fn normalize_backward(e: &[f64], norm: f64, de: &[f64]) -> Vec<f64> {
    let proj = dot(e, de);
    e.iter().zip(de).map(|(ei, di)| (di - ei * proj) / norm).collect()
}

/// `mean_u −log softmax_v(ê_u·â_v / T)[u]` with in-batch negatives.
pub fn info_nce(users: &[&[f64]], positives: &[&[f64]], temperature: f64) -> InfoNce {
    let n = users.len();
    let (eu, nu): (Vec<_>, Vec<_>) = users.iter().map(|u| normalize(u)).unzip();
    let (ea, na): (Vec<_>, Vec<_>) = positives.iter().map(|a| normalize(a)).unzip();
    let d = users.first().map_or(0, |u| u.len());
    let mut loss = 0.0;
    let mut de_u = vec![vec![0.0; d]; n];
    let mut de_a = vec![vec![0.0; d]; n];
    let scale = 1.0 / (temperature * n as f64);
    for u in 0..n {
        let logits: Vec<f64> = ea.iter().map(|a| dot(&eu[u], a) / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        loss += max + sum.ln() - logits[u];
        for v in 0..n {
            let p = (logits[v] - max).exp() / sum;
            let dz = p - if u == v { 1.0 } else { 0.0 };
            for c in 0..d {
                de_u[u][c] += dz * ea[v][c] * scale;
                de_a[v][c] += dz * eu[u][c] * scale;
            }
        }
    }
    InfoNce {
        loss: loss / n as f64,
        d_users: (0..n).map(|u| normalize_backward(&eu[u], nu[u], &de_u[u])).collect(),
        d_positives: (0..n).map(|v| normalize_backward(&ea[v], na[v], &de_a[v])).collect(),
    }
}

fn forward_batch(params: &ModelParams, cfg: &ModelConfig, batch: &RaggedBatch) -> Result<Vec<UserForward>> {
    batch
        .entries
        .iter()
        .map(|e| forward_inputs(&params.encoder, cfg, e.user_id, &e.sources))
        .collect()
}

fn batch_nce(params: &ModelParams, cfg: &ModelConfig, batch: &RaggedBatch, fwd: &[UserForward]) -> InfoNce {
    let users: Vec<&[f64]> = fwd.iter().map(|f| f.output.row(0)).collect();
    let positives: Vec<&[f64]> = batch
        .entries
        .iter()
        .map(|e| params.accounts.row(account_row(e.positive_account, cfg.n_accounts)))
        .collect();
    info_nce(&users, &positives, cfg.temperature)
}

pub fn batch_loss(params: &ModelParams, cfg: &ModelConfig, batch: &RaggedBatch) -> Result<f64> {
    let fwd = forward_batch(params, cfg, batch)?;
    Ok(batch_nce(params, cfg, batch, &fwd).loss)
}

/// Loss and the full analytic gradient for every parameter.
pub fn loss_and_grads(params: &ModelParams, cfg: &ModelConfig, batch: &RaggedBatch) -> Result<(f64, ModelParams)> {
    if batch.entries.len() < 2 {
        return Err(Error::Invalid("batch needs at least 2 users for in-batch negatives".into()));
    }
    let fwd = forward_batch(params, cfg, batch)?;
    let nce = batch_nce(params, cfg, batch, &fwd);
    let mut grads = ModelParams::zeros(cfg);
    if !nce.loss.is_finite() {
        return Ok((nce.loss, grads));
    }
    // Fixed user order keeps the reduction reproducible.
    for (u, (entry, f)) in batch.entries.iter().zip(&fwd).enumerate() {
        let mut dout = Mat::zeros(cfg.n_outputs, cfg.d_model);
        dout.row_mut(0).copy_from_slice(&nce.d_users[u]);
        backward_inputs(&params.encoder, cfg, &entry.sources, f, &dout, &mut grads.encoder);
        let row = account_row(entry.positive_account, cfg.n_accounts);
        for (g, v) in grads.accounts.row_mut(row).iter_mut().zip(&nce.d_positives[u]) {
            *g += v;
        }
    }
    Ok((nce.loss, grads))
}

/// One SGD step. Parameters are left untouched if the loss is not finite.
pub fn train_step(params: &mut ModelParams, cfg: &ModelConfig, batch: &RaggedBatch) -> Result<f64> {
    let (loss, grads) = loss_and_grads(params, cfg, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss,
            learning_rate: cfg.learning_rate,
        });
    }
    params.sgd_step(&grads, cfg.learning_rate);
    Ok(loss)
}

/// Epoch-shuffled batch sampler, deterministic from the seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n_examples: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        let mut order: Vec<usize> = (0..n_examples).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, cursor: 0, rng }
    }

    pub fn next_batch(&mut self, examples: &[BatchEntry], batch_size: usize) -> RaggedBatch {
        let size = batch_size.min(examples.len());
        let mut entries = Vec::with_capacity(size);
        while entries.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            entries.push(examples[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        RaggedBatch { entries }
    }
}

/// Runs `steps` SGD steps and returns the per-step losses.
pub fn train(params: &mut ModelParams, cfg: &ModelConfig, examples: &[BatchEntry], steps: usize) -> Result<Vec<f64>> {
    if examples.len() < 2 {
        return Err(Error::Invalid("need at least 2 training examples".into()));
    }
    let mut sampler = BatchSampler::new(examples.len(), cfg.seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next_batch(examples, cfg.batch_size);
        let loss = train_step(params, cfg, &batch)?;
        if step % 50 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean loss over consecutive fixed batches of `batch_size` (a trailing
/// singleton joins the previous batch), independent of sampling.
pub fn evaluation_loss(params: &ModelParams, cfg: &ModelConfig, examples: &[BatchEntry]) -> Result<f64> {
    let mut chunks: Vec<&[BatchEntry]> = examples.chunks(cfg.batch_size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
        let last = chunks.pop().expect("non-empty");
        let prev = chunks.pop().expect("non-empty");
        let start = examples.len() - prev.len() - last.len();
        chunks.push(&examples[start..]);
    }
    let mut total = 0.0;
    for c in &chunks {
        total += batch_loss(params, cfg, &RaggedBatch { entries: c.to_vec() })?;
    }
    Ok(total / chunks.len() as f64)
}
