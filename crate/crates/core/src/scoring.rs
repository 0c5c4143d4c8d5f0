//! Length-normalized likelihood scoring and speech-only generation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::interleave::MixedSequence;
use crate::model::{self, log_sum_exp, ModelConfig, ModelState, Params};
use crate::rng;
use crate::vocab::UnifiedVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// Mean negative log-likelihood in nats over masked-in targets.
    pub nll_mean: f64,
    /// `-nll_mean`; higher is more plausible.
    pub score: f64,
    pub token_count: usize,
    /// NLL per masked-in target position, in sequence order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<f64>>,
}

pub fn score(state: &ModelState, seq: &MixedSequence, per_token: bool) -> Result<ScoreResult> {
    score_params(&state.config, &state.params, seq, per_token)
}

/// `ℓ̄ = Σ m_t·(−log p(x_t | x_<t)) / Σ m_t` using `seq.loss_mask` as `m`.
pub fn score_params(
    cfg: &ModelConfig,
    params: &Params,
    seq: &MixedSequence,
    per_token: bool,
) -> Result<ScoreResult> {
    let targets: Vec<usize> = (1..seq.len()).filter(|&t| seq.loss_mask[t]).collect();
    ensure!(
        !targets.is_empty(),
        Error::InvalidArgument("sequence has no scored positions".into())
    );
    // Trailing unscored positions cannot influence earlier logits.
    let last = *targets.last().unwrap();
    let fwd = model::forward_params(cfg, params, &seq.ids[..last])?;
    let mut nll = Vec::with_capacity(targets.len());
    for &t in &targets {
        let row = fwd.logits.row(t - 1);
        nll.push(log_sum_exp(row) - row[seq.ids[t] as usize]);
    }
    let nll_mean = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok(ScoreResult {
        nll_mean,
        score: -nll_mean,
        token_count: nll.len(),
        per_token: per_token.then_some(nll),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// Only speech tokens and `</s>` may be emitted.
    SpeechOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Argmax,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Emitted vocabulary ids, including a final `</s>` when one was drawn.
    pub ids: Vec<u32>,
    /// Codec indices of the emitted speech tokens.
    pub codes: Vec<u32>,
    pub stopped_at_eos: bool,
}

fn allowed(vocab: &UnifiedVocab, mode: GenerationMode) -> Vec<bool> {
    match mode {
        GenerationMode::SpeechOnly => (0..vocab.total_size() as u32)
            .map(|id| vocab.is_speech(id) || id == vocab.eos_id())
            .collect(),
    }
}

/// Next-token distribution after `ids` with every disallowed logit set to
/// −∞, at temperature `temperature`.
pub fn masked_distribution(
    state: &ModelState,
    vocab: &UnifiedVocab,
    ids: &[u32],
    mode: GenerationMode,
    temperature: f64,
) -> Result<Vec<f64>> {
    ensure!(
        vocab.total_size() == state.config.vocab_size,
        Error::ShapeMismatch("vocabulary does not match the model".into())
    );
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        Error::InvalidArgument(format!("temperature {temperature} must be positive"))
    );
    let fwd = model::forward(state, ids)?;
    let row = fwd.logits.row(ids.len() - 1);
    let ok = allowed(vocab, mode);
    let masked: Vec<f64> = row
        .iter()
        .zip(&ok)
        .map(|(&l, &a)| if a { l / temperature } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(ndarray::ArrayView1::from(&masked));
    Ok(masked.iter().map(|&l| (l - lse).exp()).collect())
}

pub fn generate(
    state: &ModelState,
    vocab: &UnifiedVocab,
    prompt: &[u32],
    max_new: usize,
    mode: GenerationMode,
    decoding: Decoding,
    seed: u64,
) -> Result<Generation> {
    ensure!(!prompt.is_empty(), Error::InvalidArgument("empty prompt".into()));
    ensure!(max_new >= 1, Error::InvalidArgument("max_new must be >= 1".into()));
    ensure!(
        prompt.len() + max_new <= state.config.max_seq_len + 1,
        Error::SequenceTooLong {
            len: prompt.len() + max_new,
            max: state.config.max_seq_len + 1,
        }
    );
    let mut r = rng::seeded(seed);
    let mut ids = prompt.to_vec();
    let mut out = Generation {
        ids: Vec::new(),
        codes: Vec::new(),
        stopped_at_eos: false,
    };
    for _ in 0..max_new {
        let next = match decoding {
            Decoding::Argmax => {
                let p = masked_distribution(state, vocab, &ids, mode, 1.0)?;
                // First maximum wins ties.
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                best as u32
            }
            Decoding::Sample { temperature } => {
                let p = masked_distribution(state, vocab, &ids, mode, temperature)?;
                let dist = WeightedIndex::new(&p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                dist.sample(&mut r) as u32
            }
        };
        out.ids.push(next);
        if next == vocab.eos_id() {
            out.stopped_at_eos = true;
            break;
        }
        out.codes.push(vocab.code_of(next)? as u32);
        ids.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::Modality;
    use crate::model::ModelConfig;

    fn tiny() -> (ModelState, UnifiedVocab) {
        let vocab = UnifiedVocab::build(&["a".into(), "b".into(), "c".into(), "d".into()], 24).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            vocab_size: vocab.total_size(),
            n_codes: 24,
            n_coarse: 4,
            d_ssl: 4,
        };
        (ModelState::new(cfg, 3).unwrap(), vocab)
    }

    fn seq_of(ids: &[u32]) -> MixedSequence {
        let mut s = MixedSequence::empty();
        for (t, &id) in ids.iter().enumerate() {
            s.push(id, Modality::Audio, None, None, t as f64);
        }
        s.loss_mask[0] = false;
        s
    }

    #[test]
    fn uniform_model_scores_log_v() {
        let (mut st, _) = tiny();
        st.params.w_out.fill(0.0);
        st.params.b_out.fill(0.0);
        let r = score(&st, &seq_of(&[5, 6, 7, 8, 9]), true).unwrap();
        let ln_v = (st.config.vocab_size as f64).ln();
        assert!((r.nll_mean - ln_v).abs() < 1e-12);
        assert_eq!(r.token_count, 4);
        assert_eq!(r.score, -r.nll_mean);
    }

    #[test]
    fn all_masked_is_rejected() {
        let (st, _) = tiny();
        let mut s = seq_of(&[5, 6, 7]);
        s.loss_mask.iter_mut().for_each(|m| *m = false);
        assert!(score(&st, &s, false).is_err());
    }

    #[test]
    fn argmax_is_deterministic_and_masked() {
        let (st, vocab) = tiny();
        let a = generate(&st, &vocab, &[vocab.speech_delim_id()], 20, GenerationMode::SpeechOnly, Decoding::Argmax, 0)
            .unwrap();
        let b = generate(&st, &vocab, &[vocab.speech_delim_id()], 20, GenerationMode::SpeechOnly, Decoding::Argmax, 9)
            .unwrap();
        assert_eq!(a, b);
        assert!(a.ids.iter().all(|&id| vocab.is_speech(id) || id == vocab.eos_id()));
    }

    #[test]
    fn masked_distribution_sums_to_one() {
        let (st, vocab) = tiny();
        let p = masked_distribution(&st, &vocab, &[vocab.speech_delim_id(), 30], GenerationMode::SpeechOnly, 0.7)
            .unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (id, &v) in p.iter().enumerate() {
            let ok = vocab.is_speech(id as u32) || id as u32 == vocab.eos_id();
            assert_eq!(v > 0.0, ok);
        }
    }
}
