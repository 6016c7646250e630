//! Per-source Transformer stacks with CFEE enrichment, cross-attention
//! pooling, embedding compression, contrastive training and checkpoints.

mod attention;
mod checkpoint;
mod config;
mod forward;
mod params;
mod train;

pub use attention::{attention_backward, attention_forward, AttnCache, AttnGrads, AttnParams, AttnSpec, Rotation};
pub use checkpoint::{
    checkpoint_id, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{CompressionVariant, ModelConfig};
pub use forward::{
    compress, cross_attend, encode_sequence, history_inputs, layer_backward, layer_forward, pairwise_dots,
    EventToken, LayerCache, SequenceInput,
};
pub use params::{
    n_pairs, CompressionParams, EncoderParams, InteractionParams, LayerParams, ModelParams, SkipDotParams,
    SourceParams,
};
pub use train::{
    account_row, batch_loss, evaluation_loss, info_nce, loss_and_grads, train, train_step, training_example,
    training_examples, BatchEntry, BatchSampler, InfoNce, RaggedBatch,
};

use crate::error::Result;
use crate::event_model::UserHistory;
use crate::tensor::Mat;

/// `M` compact vectors for one user, tagged with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding {
    pub user_id: u64,
    pub vectors: Mat,
    pub model_version: u64,
    pub snapshot_version: u64,
}

/// Embeds one user. Versions are left at 0 for the caller to stamp.
pub fn forward_user(params: &EncoderParams, cfg: &ModelConfig, history: &UserHistory) -> Result<UserEmbedding> {
    let inputs = history_inputs(history, cfg.n_sources)?;
    embed_inputs(params, cfg, history.user_id, &inputs)
}

/// Embeds pre-built encoder inputs.
pub fn embed_inputs(
    params: &EncoderParams,
    cfg: &ModelConfig,
    user_id: u64,
    inputs: &[SequenceInput],
) -> Result<UserEmbedding> {
    let fwd = forward::forward_inputs(params, cfg, user_id, inputs)?;
    Ok(UserEmbedding {
        user_id,
        vectors: fwd.output,
        model_version: 0,
        snapshot_version: 0,
    })
}

/// Embeds every entry of a ragged batch, in entry order. Entries are
/// evaluated independently, so each result is bitwise the solo result.
pub fn embed_batch(params: &EncoderParams, cfg: &ModelConfig, batch: &RaggedBatch) -> Result<Vec<UserEmbedding>> {
    crate::parallel::par_map(&batch.entries, |e| embed_inputs(params, cfg, e.user_id, &e.sources))
        .into_iter()
        .collect()
}

/// Every attention probability matrix produced while embedding `inputs`.
pub fn attention_probabilities(
    params: &EncoderParams,
    cfg: &ModelConfig,
    inputs: &[SequenceInput],
) -> Result<Vec<Mat>> {
    let fwd = forward::forward_inputs(params, cfg, 0, inputs)?;
    Ok(forward::all_attention_probs(&fwd).into_iter().cloned().collect())
}
