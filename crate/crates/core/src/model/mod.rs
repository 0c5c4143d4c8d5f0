//! Small decoder-only transformer over the unified vocabulary.
//!
//! All arithmetic is f64 and every gradient is hand-derived; see
//! `tests/gradcheck.rs` for the finite-difference verification.

mod forward;
mod loss;
mod ops;
mod optim;
mod params;
mod state;
mod train;

pub use forward::Forward;
pub use loss::{check_sequence, pooled_hidden, total_loss, AuxInputs, LossOutput, LossTerms, LossWeights};
pub use ops::{log_sum_exp, softmax};
pub use optim::{adamw_update, AdamState, OptimizerConfig, Schedule};
pub use params::{LayerParams, ModelConfig, Params, TensorMut, TensorRef};
pub use state::{ModelState, CHECKPOINT_KIND};
pub use train::{
    journal_losses_equal, read_journal, sample_batch, train_step, Example, RecordAudit, JournalEntry, JournalWriter, TrainConfig,
    TrainData, Trainer,
};

/// Causal forward pass. Logits at row `t` depend only on `ids[..=t]`.
pub fn forward(state: &ModelState, ids: &[u32]) -> crate::Result<Forward> {
    forward_params(&state.config, &state.params, ids)
}

pub fn forward_params(cfg: &ModelConfig, params: &Params, ids: &[u32]) -> crate::Result<Forward> {
    crate::error::ensure!(
        !ids.is_empty(),
        crate::Error::InvalidArgument("empty input".into())
    );
    crate::error::ensure!(
        ids.len() <= cfg.max_seq_len,
        crate::Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len
        }
    );
    crate::error::ensure!(
        ids.iter().all(|&i| (i as usize) < cfg.vocab_size),
        crate::Error::InvalidArgument("token id outside the vocabulary".into())
    );
    Ok(forward::forward_cached(cfg, params, ids, true).0)
}
