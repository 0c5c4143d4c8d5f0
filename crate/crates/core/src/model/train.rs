//! Training loop, batch assembly and the append-only journal.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, AuxInputs, LossTerms, LossWeights};
use super::optim::{adamw_update, OptimizerConfig};
use super::state::ModelState;
use crate::augment::{Span, ThinSpec};
use crate::error::{Error, Result};
use crate::interleave::{self, InterleaveConfig, MixedSequence};
use crate::rng;
use crate::synthgen::FrameStream;
use crate::vocab::UnifiedVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Thin and erase audio runs with `thin`; off trains on clean audio.
    pub augment: bool,
    pub thin: ThinSpec,
    pub interleave: InterleaveConfig,
    /// Probability that a drawn record is interleaved rather than
    /// speech-only. Ignored when `interleave.windows == (0, 0)`.
    pub interleave_prob: f64,
    /// Auxiliary weights are held at zero before this step.
    #[serde(default)]
    pub aux_warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            augment: true,
            thin: ThinSpec::default(),
            interleave: InterleaveConfig {
                windows: (0, 0),
                ..InterleaveConfig::default()
            },
            interleave_prob: 1.0,
            aux_warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub streams: &'a [FrameStream],
    pub vocab: &'a UnifiedVocab,
}

#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub record: usize,
    pub seq: MixedSequence,
    pub features: &'a Array2<f64>,
    pub interleaved: bool,
    pub augment: Vec<(usize, Vec<Span>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordAudit {
    pub record: usize,
    pub interleaved: bool,
    /// `(rate, erased spans)` per audio run.
    pub augment: Vec<(usize, Vec<Span>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub step: u64,
    pub losses: LossTerms,
    pub lr: f64,
    pub grad_norm: f64,
    pub records: Vec<RecordAudit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
}

/// Draws one batch from the state's random stream. The number of draws per
/// example is fixed, so the stream position depends only on the batch size.
pub fn sample_batch<'a>(
    state: &mut ModelState,
    data: &TrainData<'a>,
    cfg: &TrainConfig,
) -> Result<Vec<Example<'a>>> {
    if data.streams.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    let mut out = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let record = state.rng.random_range(0..data.streams.len());
        let seed: u64 = state.rng.random();
        let u: f64 = state.rng.random();
        let stream = &data.streams[record];
        let interleaved = cfg.interleave.windows.1 > 0 && u < cfg.interleave_prob;
        let base = if interleaved {
            interleave::interleave(stream, data.vocab, &cfg.interleave, rng::derive(seed, 0))?.sequence
        } else {
            interleave::speech_only(stream, data.vocab)?
        };
        let (seq, augment) = if cfg.augment {
            interleave::apply_audio_augment_logged(&base, &cfg.thin, rng::derive(seed, 1))?
        } else {
            (base, Vec::new())
        };
        out.push(Example {
            record,
            seq,
            features: &stream.features,
            interleaved,
            augment,
        });
    }
    Ok(out)
}

/// One optimizer update on the mean loss of `batch`.
pub fn train_step(state: &mut ModelState, batch: &[Example<'_>], cfg: &TrainConfig) -> Result<JournalEntry> {
    cfg.optimizer.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut weights = cfg.weights.clone();
    if state.step < cfg.aux_warmup_steps {
        weights.coarse = 0.0;
        weights.next = 0.0;
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads = state.params.zeros_like();
    let mut terms = LossTerms::default();
    for ex in batch {
        let aux = AuxInputs {
            features: Some(ex.features),
            coarse: state.coarse.as_ref(),
            proj_trainable: state.proj_trainable,
        };
        let out = total_loss(&state.config, &state.params, &ex.seq, &weights, &aux, true)?;
        terms.add_scaled(inv, &out.terms);
        grads.add_scaled(inv, &out.grads.expect("gradients requested"));
    }
    let grad_norm = grads.sq_norm().sqrt();
    if !terms.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            batch: state.step,
            detail: format!(
                "losses {terms:?}, grad norm {grad_norm}, records {:?}",
                batch.iter().map(|e| e.record).collect::<Vec<_>>()
            ),
        });
    }
    if cfg.optimizer.grad_clip > 0.0 && grad_norm > cfg.optimizer.grad_clip {
        grads.scale(cfg.optimizer.grad_clip / grad_norm);
    }
    let lr = cfg.optimizer.lr_at(state.step);
    let frozen: &[&str] = if state.proj_trainable { &[] } else { &["proj_w", "proj_b"] };
    adamw_update(
        &cfg.optimizer,
        &mut state.params,
        &grads,
        &mut state.opt,
        state.step + 1,
        lr,
        frozen,
    );
    state.step += 1;
    Ok(JournalEntry {
        step: state.step,
        losses: terms,
        lr,
        grad_norm,
        records: batch
            .iter()
            .map(|e| RecordAudit {
                record: e.record,
                interleaved: e.interleaved,
                augment: e.augment.clone(),
            })
            .collect(),
        time: None,
    })
}

/// Runs `n_steps` updates, handing each journal entry to `on_step`.
pub struct Trainer<'a> {
    pub data: TrainData<'a>,
    pub config: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(data: TrainData<'a>, config: &'a TrainConfig) -> Self {
        Trainer { data, config }
    }

    pub fn run(
        &self,
        state: &mut ModelState,
        n_steps: u64,
        mut on_step: impl FnMut(&ModelState, &JournalEntry) -> Result<()>,
    ) -> Result<Vec<JournalEntry>> {
        let mut journal = Vec::with_capacity(n_steps as usize);
        for _ in 0..n_steps {
            let batch = sample_batch(state, &self.data, self.config)?;
            let entry = train_step(state, &batch, self.config)?;
            on_step(state, &entry)?;
            journal.push(entry);
        }
        Ok(journal)
    }
}

/// Append-only JSON-lines journal.
pub struct JournalWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    timestamps: bool,
}

impl JournalWriter {
    pub fn append(path: &Path, timestamps: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JournalWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            timestamps,
        })
    }

    pub fn write(&mut self, entry: &JournalEntry) -> Result<()> {
        let mut e = entry.clone();
        if self.timestamps {
            e.time = Some(
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs_f64())
                    .unwrap_or(0.0),
            );
        }
        writeln!(self.out, "{}", serde_json::to_string(&e)?).map_err(|err| Error::io(&self.path, err))?;
        self.out.flush().map_err(|err| Error::io(&self.path, err))
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Entry-wise equality ignoring wall-clock timestamps.
pub fn journal_losses_equal(a: &[JournalEntry], b: &[JournalEntry]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.losses == y.losses
                && x.lr.to_bits() == y.lr.to_bits()
                && x.grad_norm.to_bits() == y.grad_norm.to_bits()
                && x.records == y.records
        })
}
