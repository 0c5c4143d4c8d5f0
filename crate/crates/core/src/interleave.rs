//! Mixed text/speech training sequences.
//!
//! Word-aligned windows of an utterance are replaced by their text tokens;
//! the rest stays as codec tokens. Every modality change opens with its
//! delimiter and sequences end with `</s>`. Loss masks are per target token:
//! `loss_mask[t]` says whether `-log p(x_t | x_<t)` counts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, ThinSpec};
use crate::distill::CoarseMap;
use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::synthgen::{FrameStream, FRAME_SECONDS};
use crate::vocab::{TokenId, UnifiedVocab};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Delimiter,
    Special,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSequence {
    pub ids: Vec<TokenId>,
    pub modality: Vec<Modality>,
    pub loss_mask: Vec<bool>,
    /// Codec index at audio positions.
    pub codes: Vec<Option<u32>>,
    /// Source frame index at audio positions (row of the stream's features).
    pub frames: Vec<Option<u32>>,
    /// Start time of the material each position stands for.
    pub time: Vec<f64>,
}

impl MixedSequence {
    pub fn empty() -> Self {
        MixedSequence {
            ids: vec![],
            modality: vec![],
            loss_mask: vec![],
            codes: vec![],
            frames: vec![],
            time: vec![],
        }
    }

    pub fn push(&mut self, id: TokenId, m: Modality, code: Option<u32>, frame: Option<u32>, time: f64) {
        // The first token has no context and is never a target.
        self.loss_mask.push(!self.ids.is_empty());
        self.ids.push(id);
        self.modality.push(m);
        self.codes.push(code);
        self.frames.push(frame);
        self.time.push(time);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn audio_mask(&self) -> Vec<bool> {
        self.modality.iter().map(|&m| m == Modality::Audio).collect()
    }

    pub fn text_ids(&self) -> Vec<TokenId> {
        self.ids
            .iter()
            .zip(&self.modality)
            .filter(|(_, &m)| m == Modality::Text)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn coarse_labels(&self, map: &CoarseMap) -> Vec<Option<u32>> {
        self.codes
            .iter()
            .map(|c| c.map(|c| map.bucket_of[c as usize]))
            .collect()
    }

    /// Code at `t + delay` when every position in `t..=t + delay` is audio,
    /// so targets never reach across a text span.
    pub fn code_labels(&self, delay: usize) -> Vec<Option<u32>> {
        (0..self.len())
            .map(|t| {
                let end = t + delay;
                if end < self.len() && self.codes[t..=end].iter().all(Option::is_some) {
                    self.codes[end]
                } else {
                    None
                }
            })
            .collect()
    }

    /// Appends `n` pad tokens that never count toward any loss.
    pub fn padded(&self, n: usize, pad_id: TokenId) -> Self {
        let mut out = self.clone();
        let t = self.time.last().copied().unwrap_or(0.0);
        for _ in 0..n {
            out.ids.push(pad_id);
            out.modality.push(Modality::Special);
            out.loss_mask.push(false);
            out.codes.push(None);
            out.frames.push(None);
            out.time.push(t);
        }
        out
    }

    /// Contiguous runs of equal modality as `(modality, start, end)`.
    pub fn runs(&self) -> Vec<(Modality, usize, usize)> {
        let mut out: Vec<(Modality, usize, usize)> = Vec::new();
        for (i, &m) in self.modality.iter().enumerate() {
            match out.last_mut() {
                Some(last) if last.0 == m && last.2 == i => last.2 = i + 1,
                _ => out.push((m, i, i + 1)),
            }
        }
        out
    }
}

/// `[Speech] c_0 .. c_{T-1} </s>`.
pub fn speech_only(stream: &FrameStream, vocab: &UnifiedVocab) -> Result<MixedSequence> {
    let mut seq = MixedSequence::empty();
    let t0 = stream.times.first().map_or(0.0, |t| t.0);
    seq.push(vocab.speech_delim_id(), Modality::Delimiter, None, None, t0);
    for (t, &code) in stream.codes.iter().enumerate() {
        seq.push(
            vocab.speech_id(code as usize)?,
            Modality::Audio,
            Some(code),
            Some(t as u32),
            stream.times[t].0,
        );
    }
    let end = stream.times.last().map_or(0.0, |t| t.1);
    seq.push(vocab.eos_id(), Modality::Special, None, None, end);
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterleaveConfig {
    /// Allowed text fraction of utterance duration.
    pub budget: (f64, f64),
    /// Inclusive range for the number of text windows; `(0, 0)` is
    /// speech-only.
    pub windows: (usize, usize),
}

impl Default for InterleaveConfig {
    fn default() -> Self {
        InterleaveConfig {
            budget: (0.35, 0.55),
            windows: (1, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleaveOutcome {
    pub sequence: MixedSequence,
    /// Achieved text share of the utterance duration.
    pub text_fraction: f64,
    /// False when no window placement met the budget; the closest placement
    /// is used instead.
    pub budget_met: bool,
    /// Word index ranges `[a, b)` rendered as text.
    pub windows: Vec<(usize, usize)>,
}

const PLACEMENT_ATTEMPTS: usize = 64;

fn grow_windows(
    durations: &[f64],
    starts: &[usize],
    target: f64,
) -> Vec<(usize, usize)> {
    let mut wins: Vec<(usize, usize)> = starts.iter().map(|&s| (s, s + 1)).collect();
    let mut total: f64 = wins.iter().map(|w| durations[w.0]).sum();
    loop {
        if total >= target {
            break;
        }
        let mut grew = false;
        for i in 0..wins.len() {
            if total >= target {
                break;
            }
            // Keep at least one audio word between windows.
            let limit = if i + 1 < wins.len() { wins[i + 1].0 - 1 } else { durations.len() };
            if wins[i].1 < limit {
                total += durations[wins[i].1];
                wins[i].1 += 1;
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    wins
}

pub fn interleave(
    stream: &FrameStream,
    vocab: &UnifiedVocab,
    config: &InterleaveConfig,
    seed: u64,
) -> Result<InterleaveOutcome> {
    let (lo, hi) = config.budget;
    ensure!(
        0.0 < lo && lo <= hi && hi < 1.0,
        Error::InvalidArgument(format!("budget ({lo}, {hi}) must lie inside (0, 1)"))
    );
    ensure!(
        config.windows.0 <= config.windows.1,
        Error::InvalidArgument("window count range is reversed".into())
    );
    if config.windows.1 == 0 {
        return Ok(InterleaveOutcome {
            sequence: speech_only(stream, vocab)?,
            text_fraction: 0.0,
            budget_met: true,
            windows: vec![],
        });
    }
    ensure!(
        !stream.words.is_empty(),
        Error::InvalidArgument("interleaving needs word timestamps".into())
    );
    for w in &stream.words {
        ensure!(
            w.start < w.end,
            Error::InvalidArgument(format!("word {:?} has an empty interval", w.symbol))
        );
    }
    let total = stream.duration();
    let durations: Vec<f64> = stream.words.iter().map(|w| w.end - w.start).collect();
    let n_words = durations.len();

    let mut r = rng::seeded(seed);
    let target_fraction = r.random_range(lo..=hi);
    let target = target_fraction * total;
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let dist_to_budget = |f: f64| if f < lo { lo - f } else if f > hi { f - hi } else { 0.0 };
    for _ in 0..PLACEMENT_ATTEMPTS {
        // Windows need a separating audio word, so at most ceil(n/2) fit.
        let max_windows = config.windows.1.min(n_words.div_ceil(2)).max(1);
        let min_windows = config.windows.0.clamp(1, max_windows);
        let n_win = r.random_range(min_windows..=max_windows);
        let mut starts: Vec<usize> = Vec::with_capacity(n_win);
        let mut guard = 0;
        while starts.len() < n_win && guard < 100 {
            guard += 1;
            let s = r.random_range(0..n_words);
            if starts.iter().all(|&o: &usize| o.abs_diff(s) >= 2) {
                starts.push(s);
            }
        }
        starts.sort_unstable();
        let wins = grow_windows(&durations, &starts, target);
        let covered: f64 = wins
            .iter()
            .map(|&(a, b)| durations[a..b].iter().sum::<f64>())
            .sum();
        let frac = covered / total;
        let better = match &best {
            None => true,
            Some((f, _)) => dist_to_budget(frac) < dist_to_budget(*f),
        };
        if better {
            best = Some((frac, wins));
        }
        if dist_to_budget(frac) == 0.0 {
            break;
        }
    }
    let (text_fraction, windows) = best.expect("at least one attempt");
    let budget_met = dist_to_budget(text_fraction) == 0.0;
    if !budget_met {
        log::warn!(
            "text budget ({lo}, {hi}) unattainable for stream seed {}: achieved {text_fraction:.3}",
            stream.seed
        );
    }

    // Frames whose midpoint falls inside a window are replaced by text.
    let mut in_window = vec![None; stream.len()];
    for (wi, &(a, b)) in windows.iter().enumerate() {
        let (start, end) = (stream.words[a].start, stream.words[b - 1].end);
        for (t, &(fs, fe)) in stream.times.iter().enumerate() {
            let mid = 0.5 * (fs + fe);
            if mid >= start && mid < end {
                in_window[t] = Some(wi);
            }
        }
    }

    let mut seq = MixedSequence::empty();
    let mut t = 0;
    while t < stream.len() {
        match in_window[t] {
            Some(wi) => {
                let (a, b) = windows[wi];
                seq.push(vocab.text_delim_id(), Modality::Delimiter, None, None, stream.times[t].0);
                for w in &stream.words[a..b] {
                    seq.push(vocab.text_id(&w.symbol)?, Modality::Text, None, None, w.start);
                }
                while t < stream.len() && in_window[t] == Some(wi) {
                    t += 1;
                }
            }
            None => {
                seq.push(vocab.speech_delim_id(), Modality::Delimiter, None, None, stream.times[t].0);
                while t < stream.len() && in_window[t].is_none() {
                    let code = stream.codes[t];
                    seq.push(
                        vocab.speech_id(code as usize)?,
                        Modality::Audio,
                        Some(code),
                        Some(t as u32),
                        stream.times[t].0,
                    );
                    t += 1;
                }
            }
        }
    }
    let end = stream.times.last().map_or(0.0, |x| x.1);
    seq.push(vocab.eos_id(), Modality::Special, None, None, end);
    Ok(InterleaveOutcome {
        sequence: seq,
        text_fraction,
        budget_met,
        windows,
    })
}

/// Thins and erases every contiguous audio run independently; text,
/// delimiters and specials pass through untouched.
pub fn apply_audio_augment(seq: &MixedSequence, spec: &ThinSpec, seed: u64) -> Result<MixedSequence> {
    Ok(apply_audio_augment_logged(seq, spec, seed)?.0)
}

/// Rate and erased spans drawn for one audio run.
pub type AppliedAugment = (usize, Vec<augment::Span>);

/// As [`apply_audio_augment`], also returning what was applied per audio
/// run, for the training journal.
pub fn apply_audio_augment_logged(
    seq: &MixedSequence,
    spec: &ThinSpec,
    seed: u64,
) -> Result<(MixedSequence, Vec<AppliedAugment>)> {
    let mut applied = Vec::new();
    let mut out = MixedSequence::empty();
    let mut audio_run = 0u64;
    for (m, a, b) in seq.runs() {
        if m != Modality::Audio {
            for i in a..b {
                out.ids.push(seq.ids[i]);
                out.modality.push(seq.modality[i]);
                out.loss_mask.push(seq.loss_mask[i]);
                out.codes.push(seq.codes[i]);
                out.frames.push(seq.frames[i]);
                out.time.push(seq.time[i]);
            }
            continue;
        }
        let (rate, spans) = augment::sample_augmentation(spec, b - a, rng::derive(seed, audio_run))?;
        audio_run += 1;
        let kept = augment::kept_positions(b - a, rate, &spans)?;
        applied.push((rate, spans));
        for p in kept {
            let i = a + p;
            out.ids.push(seq.ids[i]);
            out.modality.push(Modality::Audio);
            out.loss_mask.push(seq.loss_mask[i]);
            out.codes.push(seq.codes[i]);
            out.frames.push(seq.frames[i]);
            out.time.push(seq.time[i]);
        }
    }
    Ok((out, applied))
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    schema_version: u32,
    ids: Vec<TokenId>,
    /// Run-length encoded modality flags.
    modality: Vec<(Modality, usize)>,
    loss_mask: Vec<bool>,
    codes: Vec<Option<u32>>,
    frames: Vec<Option<u32>>,
    time: Vec<f64>,
}

impl MixedSequence {
    pub fn to_json(&self) -> Result<String> {
        let rec = SequenceRecord {
            schema_version: SCHEMA_VERSION,
            ids: self.ids.clone(),
            modality: self.runs().into_iter().map(|(m, a, b)| (m, b - a)).collect(),
            loss_mask: self.loss_mask.clone(),
            codes: self.codes.clone(),
            frames: self.frames.clone(),
            time: self.time.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(line: &str) -> Result<Self> {
        let rec: SequenceRecord = serde_json::from_str(line)?;
        ensure!(
            rec.schema_version == SCHEMA_VERSION,
            Error::VersionMismatch {
                found: rec.schema_version,
                expected: SCHEMA_VERSION
            }
        );
        let modality: Vec<Modality> = rec
            .modality
            .iter()
            .flat_map(|&(m, n)| std::iter::repeat_n(m, n))
            .collect();
        let n = rec.ids.len();
        ensure!(
            modality.len() == n
                && rec.loss_mask.len() == n
                && rec.codes.len() == n
                && rec.frames.len() == n
                && rec.time.len() == n,
            Error::Format("sequence record fields have different lengths".into())
        );
        Ok(MixedSequence {
            ids: rec.ids,
            modality,
            loss_mask: rec.loss_mask,
            codes: rec.codes,
            frames: rec.frames,
            time: rec.time,
        })
    }
}

/// Frame-count duration helper for callers working in frames.
pub fn frames_to_seconds(n: usize) -> f64 {
    n as f64 * FRAME_SECONDS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_codebook, LatentSpec, World};

    fn setup() -> (World, crate::synthgen::Codebook, UnifiedVocab) {
        let world = World::new(LatentSpec::default(), 1).unwrap();
        let cb = make_codebook(2, 32, world.spec.feature_dim).unwrap();
        let vocab = UnifiedVocab::build(&world.lexicon_symbols(), 32).unwrap();
        (world, cb, vocab)
    }

    fn delimiter_count(seq: &MixedSequence) -> usize {
        seq.modality.iter().filter(|&&m| m == Modality::Delimiter).count()
    }

    #[test]
    fn speech_only_layout() {
        let (world, cb, vocab) = setup();
        let s = world.utterance(&cb, 3, world.random_latents(3), 20).unwrap();
        let seq = speech_only(&s, &vocab).unwrap();
        assert_eq!(seq.len(), 22);
        assert_eq!(seq.ids[0], vocab.speech_delim_id());
        assert_eq!(*seq.ids.last().unwrap(), vocab.eos_id());
        assert_eq!(delimiter_count(&seq), 1);
        assert!(!seq.loss_mask[0] && seq.loss_mask[1..].iter().all(|&m| m));
        let zero = InterleaveConfig { windows: (0, 0), ..InterleaveConfig::default() };
        assert_eq!(interleave(&s, &vocab, &zero, 5).unwrap().sequence, seq);
    }

    #[test]
    fn budget_respected_over_many_seeds() {
        let (world, cb, vocab) = setup();
        let cfg = InterleaveConfig::default();
        for seed in 0..1000u64 {
            let s = world.utterance(&cb, seed, world.random_latents(seed), 60).unwrap();
            let out = interleave(&s, &vocab, &cfg, seed).unwrap();
            if out.budget_met {
                assert!(out.text_fraction >= 0.35 && out.text_fraction <= 0.55, "{}", out.text_fraction);
            }
            // alternation and delimiters
            let runs = out.sequence.runs();
            let mut prev_kind = None;
            for (m, a, _) in &runs {
                if *m == Modality::Delimiter {
                    let kind = out.sequence.ids[*a];
                    assert_ne!(Some(kind), prev_kind, "consecutive spans share a modality");
                    prev_kind = Some(kind);
                }
            }
            for w in out.sequence.time.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn window_at_start_gives_two_delimiters() {
        let (world, cb, vocab) = setup();
        let s = world.utterance(&cb, 8, world.random_latents(8), 60).unwrap();
        let cfg = InterleaveConfig { windows: (1, 1), ..InterleaveConfig::default() };
        let mut found = false;
        for seed in 0..200 {
            let out = interleave(&s, &vocab, &cfg, seed).unwrap();
            if out.windows[0].0 == 0 {
                assert_eq!(out.sequence.ids[0], vocab.text_delim_id());
                assert_eq!(delimiter_count(&out.sequence), 2);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn no_words_rejected() {
        let (world, cb, vocab) = setup();
        let mut s = world.utterance(&cb, 8, world.random_latents(8), 30).unwrap();
        s.words.clear();
        assert!(interleave(&s, &vocab, &InterleaveConfig::default(), 0).is_err());
    }

    #[test]
    fn augmentation_leaves_text_alone() {
        let (world, cb, vocab) = setup();
        let spec = ThinSpec { p_erase: 0.3, ..ThinSpec::default() };
        for seed in 0..50 {
            let s = world.utterance(&cb, seed, world.random_latents(seed), 60).unwrap();
            let seq = interleave(&s, &vocab, &InterleaveConfig::default(), seed).unwrap().sequence;
            let aug = apply_audio_augment(&seq, &spec, seed).unwrap();
            assert_eq!(aug.text_ids(), seq.text_ids());
            assert_eq!(delimiter_count(&aug), delimiter_count(&seq));
        }
    }

    #[test]
    fn all_text_sequence_unchanged() {
        let (_, _, vocab) = setup();
        let mut seq = MixedSequence::empty();
        seq.push(vocab.text_delim_id(), Modality::Delimiter, None, None, 0.0);
        for i in 0..5 {
            seq.push(i, Modality::Text, None, None, i as f64);
        }
        seq.push(vocab.eos_id(), Modality::Special, None, None, 5.0);
        let aug = apply_audio_augment(&seq, &ThinSpec { p_erase: 0.5, ..ThinSpec::default() }, 3).unwrap();
        assert_eq!(aug, seq);
    }

    #[test]
    fn json_round_trip() {
        let (world, cb, vocab) = setup();
        let s = world.utterance(&cb, 4, world.random_latents(4), 50).unwrap();
        let seq = interleave(&s, &vocab, &InterleaveConfig::default(), 4).unwrap().sequence.padded(3, vocab.pad_id());
        assert_eq!(MixedSequence::from_json(&seq.to_json().unwrap()).unwrap(), seq);
    }
}
