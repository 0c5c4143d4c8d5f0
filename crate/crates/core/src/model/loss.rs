//! Main and auxiliary objectives.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::forward::{self, OutputGrads};
use super::ops;
use super::params::{ModelConfig, Params};
use crate::distill::{self, CoarseMap, Projection};
use crate::error::{ensure, Error, Result};
use crate::interleave::MixedSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub main: f64,
    pub ssl: f64,
    pub coarse: f64,
    pub next: f64,
    /// Offset of the auxiliary targets: position `t` predicts the bucket and
    /// code at `t + aux_delay`.
    pub aux_delay: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            main: 1.0,
            ssl: 0.1,
            coarse: 0.5,
            next: 0.5,
            aux_delay: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.main, self.ssl, self.coarse, self.next]
                .iter()
                .all(|w| *w >= 0.0 && w.is_finite()),
            Error::Config("loss weights must be finite and nonnegative".into())
        );
        ensure!(
            self.aux_delay >= 1,
            Error::Config("aux_delay must be a positive offset".into())
        );
        Ok(())
    }
}

/// Side inputs for the auxiliary terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct AuxInputs<'a> {
    /// Per-frame SSL features of the source stream, indexed by
    /// `MixedSequence::frames`.
    pub features: Option<&'a Array2<f64>>,
    pub coarse: Option<&'a CoarseMap>,
    pub proj_trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub main: f64,
    pub ssl: f64,
    pub coarse: f64,
    pub next: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.main, self.ssl, self.coarse, self.next, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, s: f64, o: &LossTerms) {
        self.main += s * o.main;
        self.ssl += s * o.ssl;
        self.coarse += s * o.coarse;
        self.next += s * o.next;
        self.total += s * o.total;
    }
}

pub struct LossOutput {
    pub terms: LossTerms,
    pub grads: Option<Params>,
}

pub fn check_sequence(cfg: &ModelConfig, seq: &MixedSequence) -> Result<()> {
    ensure!(
        !seq.is_empty(),
        Error::InvalidArgument("empty sequence".into())
    );
    ensure!(
        seq.len() <= cfg.max_seq_len,
        Error::SequenceTooLong {
            len: seq.len(),
            max: cfg.max_seq_len
        }
    );
    ensure!(
        seq.ids.iter().all(|&id| (id as usize) < cfg.vocab_size),
        Error::InvalidArgument("token id outside the vocabulary".into())
    );
    Ok(())
}

/// `λ_main·CE + λ_ssl·L_ssl + λ_coarse·CE_coarse + λ_next·CE_next`, each term
/// averaged over its own valid positions. Every term whose inputs are
/// available is reported even when its weight is zero.
pub fn total_loss(
    cfg: &ModelConfig,
    params: &Params,
    seq: &MixedSequence,
    weights: &LossWeights,
    aux: &AuxInputs<'_>,
    want_grads: bool,
) -> Result<LossOutput> {
    weights.validate()?;
    check_sequence(cfg, seq)?;
    ensure!(
        weights.coarse == 0.0 || aux.coarse.is_some(),
        Error::InvalidArgument("coarse loss weight > 0 requires a coarse map".into())
    );
    ensure!(
        weights.ssl == 0.0 || aux.features.is_some(),
        Error::InvalidArgument("alignment loss weight > 0 requires SSL features".into())
    );
    if let Some(map) = aux.coarse {
        ensure!(
            map.k == cfg.n_coarse && map.bucket_of.len() == cfg.n_codes,
            Error::ShapeMismatch("coarse map does not match the model heads".into())
        );
    }
    let t_len = seq.len();
    let (fwd, cache) = forward::forward_cached(cfg, params, &seq.ids, true);

    // Main next-token term: logits at t-1 predict ids[t].
    let mut dlogits = Array2::zeros(fwd.logits.raw_dim());
    let n_main = (1..t_len).filter(|&t| seq.loss_mask[t]).count();
    let mut main = 0.0;
    if n_main > 0 {
        let s = weights.main / n_main as f64;
        for t in 1..t_len {
            if seq.loss_mask[t] {
                main += ops::cross_entropy_into(
                    fwd.logits.row(t - 1),
                    seq.ids[t] as usize,
                    s,
                    dlogits.row_mut(t - 1),
                );
            }
        }
        main /= n_main as f64;
    }

    // Delayed auxiliaries.
    let labels = seq.code_labels(weights.aux_delay);
    let n_aux = labels.iter().filter(|l| l.is_some()).count();
    let mut dcoarse = Array2::zeros(fwd.coarse_logits.raw_dim());
    let mut dnext = Array2::zeros(fwd.next_logits.raw_dim());
    let (mut coarse, mut next) = (0.0, 0.0);
    if n_aux > 0 {
        let sc = weights.coarse / n_aux as f64;
        let sn = weights.next / n_aux as f64;
        for (t, label) in labels.iter().enumerate() {
            let Some(code) = *label else { continue };
            ensure!(
                (code as usize) < cfg.n_codes,
                Error::InvalidArgument(format!("code {code} outside next-code head"))
            );
            if let Some(map) = aux.coarse {
                coarse += ops::cross_entropy_into(
                    fwd.coarse_logits.row(t),
                    map.bucket(code as usize),
                    sc,
                    dcoarse.row_mut(t),
                );
            }
            next += ops::cross_entropy_into(fwd.next_logits.row(t), code as usize, sn, dnext.row_mut(t));
        }
        coarse /= n_aux as f64;
        next /= n_aux as f64;
    }

    // Stop-gradient alignment against the stream's SSL features.
    let mut ssl = 0.0;
    let mut dhidden = None;
    let mut dproj = None;
    if let Some(features) = aux.features {
        let audio = seq.audio_mask();
        let mut feats = Array2::zeros((t_len, cfg.d_ssl));
        ensure!(
            features.ncols() == cfg.d_ssl,
            Error::ShapeMismatch(format!(
                "feature width {} vs model d_ssl {}",
                features.ncols(),
                cfg.d_ssl
            ))
        );
        for t in 0..t_len {
            if let Some(f) = seq.frames[t] {
                ensure!(
                    (f as usize) < features.nrows(),
                    Error::ShapeMismatch(format!("frame {f} outside feature matrix"))
                );
                feats.row_mut(t).assign(&features.row(f as usize));
            }
        }
        let proj = Projection {
            weight: params.proj_w.clone(),
            bias: params.proj_b.clone(),
            trainable: aux.proj_trainable,
        };
        let al = distill::alignment_loss(fwd.hidden.view(), feats.view(), &proj, &audio)?;
        ssl = al.loss;
        if weights.ssl > 0.0 {
            dhidden = Some(al.grad_hidden * weights.ssl);
            if let (Some(gw), Some(gb)) = (al.grad_weight, al.grad_bias) {
                dproj = Some((gw * weights.ssl, gb * weights.ssl));
            }
        }
    }

    let terms = LossTerms {
        main,
        ssl,
        coarse,
        next,
        total: weights.main * main
            + weights.ssl * ssl
            + weights.coarse * coarse
            + weights.next * next,
    };
    if !want_grads {
        return Ok(LossOutput { terms, grads: None });
    }
    let mut grads = params.zeros_like();
    let up = OutputGrads {
        logits: dlogits,
        coarse: (weights.coarse > 0.0).then_some(dcoarse),
        next: (weights.next > 0.0).then_some(dnext),
        hidden: dhidden,
    };
    forward::backward(cfg, params, &cache, &up, &mut grads);
    if let Some((gw, gb)) = dproj {
        grads.proj_w += &gw;
        grads.proj_b += &gb;
    }
    Ok(LossOutput {
        terms,
        grads: Some(grads),
    })
}

/// Mean-pooled final hidden state over the given positions (all positions
/// when the mask selects none).
pub fn pooled_hidden(hidden: &Array2<f64>, mask: &[bool]) -> ndarray::Array1<f64> {
    let rows: Vec<usize> = (0..hidden.nrows()).filter(|&t| mask[t]).collect();
    if rows.is_empty() {
        return hidden.mean_axis(Axis(0)).expect("non-empty hidden");
    }
    hidden.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()
}
