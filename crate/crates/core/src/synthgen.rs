//! Synthetic corpora with planted latent factors.
//!
//! A [`World`] fixes unit-norm vectors for phones, speakers and backgrounds,
//! a lexicon (word -> phone sequence) and a set of contents (content -> word
//! sequence). An utterance renders, per 25 ms frame,
//!
//! ```text
//! feature_t = content_scale * phone(t) + speaker_scale * speaker
//!           + background_scale * background + noise_t
//! ```
//!
//! and quantizes it to the nearest row of a frozen [`Codebook`]. The SSL
//! encoder stub is the identity on `feature_t`. Features are rounded to f32
//! precision at generation time so that persisted corpora reload exactly.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::kmeans;
use crate::rng;

pub const FRAME_SECONDS: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSpec {
    pub n_speakers: usize,
    pub n_contents: usize,
    pub n_backgrounds: usize,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub n_phones: usize,
    pub lexicon_size: usize,
    pub words_per_content: usize,
    /// Inclusive range of phones per word.
    pub phones_per_word: (usize, usize),
    /// Inclusive range of frames per phone.
    pub frames_per_phone: (usize, usize),
    pub content_scale: f64,
    pub speaker_scale: f64,
    pub background_scale: f64,
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec {
            n_speakers: 8,
            n_contents: 16,
            n_backgrounds: 4,
            feature_dim: 16,
            noise_scale: 0.15,
            n_phones: 12,
            lexicon_size: 24,
            words_per_content: 6,
            phones_per_word: (2, 3),
            frames_per_phone: (2, 3),
            content_scale: 1.0,
            speaker_scale: 0.8,
            background_scale: 0.4,
        }
    }
}

impl LatentSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_speakers", self.n_speakers),
            ("n_contents", self.n_contents),
            ("n_backgrounds", self.n_backgrounds),
            ("feature_dim", self.feature_dim),
            ("n_phones", self.n_phones),
            ("lexicon_size", self.lexicon_size),
            ("words_per_content", self.words_per_content),
            ("phones_per_word.0", self.phones_per_word.0),
            ("frames_per_phone.0", self.frames_per_phone.0),
        ];
        for (name, v) in positive {
            ensure!(v >= 1, Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        ensure!(
            self.phones_per_word.0 <= self.phones_per_word.1
                && self.frames_per_phone.0 <= self.frames_per_phone.1,
            Error::InvalidArgument("duration ranges must be ordered".into())
        );
        ensure!(
            self.noise_scale >= 0.0 && self.noise_scale.is_finite(),
            Error::InvalidArgument("noise_scale must be finite and nonnegative".into())
        );
        Ok(())
    }

    pub fn factor_cardinality(&self, factor: Factor) -> usize {
        match factor {
            Factor::Speaker => self.n_speakers,
            Factor::Background => self.n_backgrounds,
            Factor::Content => self.n_contents,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Speaker,
    Background,
    Content,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Speaker, Factor::Background, Factor::Content];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Speaker => "speaker",
            Factor::Background => "background",
            Factor::Content => "content",
        }
    }
}

impl std::str::FromStr for Factor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(Factor::Speaker),
            "background" => Ok(Factor::Background),
            "content" => Ok(Factor::Content),
            other => Err(Error::InvalidArgument(format!("unknown factor {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switch {
    pub factor: Factor,
    pub frame: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latents {
    pub speaker: usize,
    pub content: usize,
    pub background: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<Switch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub symbol: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub codes: Vec<u32>,
    /// `len × feature_dim`; the SSL_t targets.
    pub features: Array2<f64>,
    pub times: Vec<(f64, f64)>,
    pub words: Vec<Word>,
    pub latents: Latents,
    pub seed: u64,
}

impl FrameStream {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.times.last().map_or(0.0, |t| t.1) - self.times.first().map_or(0.0, |t| t.0)
    }

    /// Checks the structural invariants of a stream.
    pub fn validate(&self, n_codes: usize) -> Result<()> {
        let n = self.codes.len();
        ensure!(
            self.features.nrows() == n && self.times.len() == n,
            Error::ShapeMismatch(format!(
                "codes {n}, features {}, times {}",
                self.features.nrows(),
                self.times.len()
            ))
        );
        for (i, w) in self.times.windows(2).enumerate() {
            ensure!(
                w[0].1 <= w[1].0 && w[0].0 < w[1].0,
                Error::Format(format!("frame times not increasing at {i}"))
            );
        }
        ensure!(
            self.times.iter().all(|t| t.0 < t.1),
            Error::Format("empty frame interval".into())
        );
        ensure!(
            self.codes.iter().all(|&c| (c as usize) < n_codes),
            Error::Format("codec index out of range".into())
        );
        Ok(())
    }
}

/// Frozen codec stub: one vector per codec index.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vectors: Array2<f64>,
}

impl Codebook {
    pub fn from_vectors(vectors: Array2<f64>) -> Result<Self> {
        ensure!(
            vectors.nrows() >= 2,
            Error::InvalidArgument("codebook needs at least 2 codes".into())
        );
        for i in 0..vectors.nrows() {
            for j in 0..i {
                ensure!(
                    vectors.row(i) != vectors.row(j),
                    Error::InvalidArgument(format!("codebook rows {j} and {i} coincide"))
                );
            }
        }
        Ok(Codebook { vectors })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn n_codes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn quantize(&self, x: ArrayView1<f64>) -> u32 {
        kmeans::nearest(self.vectors.view(), x).0 as u32
    }

    /// SHA-256 over the little-endian bytes of the matrix (shape included).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_codes() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.vectors.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Random Gaussian codebook, rows scaled to roughly unit norm.
pub fn make_codebook(seed: u64, n_codes: usize, d_ssl: usize) -> Result<Codebook> {
    ensure!(
        n_codes >= 2,
        Error::InvalidArgument("n_codes must be at least 2".into())
    );
    ensure!(d_ssl >= 1, Error::InvalidArgument("d_ssl must be >= 1".into()));
    let mut r = rng::seeded(seed);
    let scale = 1.0 / (d_ssl as f64).sqrt();
    let vectors = Array2::from_shape_fn((n_codes, d_ssl), |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        scale * z
    });
    Codebook::from_vectors(vectors)
}

/// The fixed latent structure of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: LatentSpec,
    pub seed: u64,
    pub phones: Array2<f64>,
    pub speakers: Array2<f64>,
    pub backgrounds: Array2<f64>,
    /// word index -> phone indices
    pub lexicon: Vec<Vec<usize>>,
    /// content index -> word indices
    pub contents: Vec<Vec<usize>>,
}

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    let mut m: Array2<f64> = Array2::from_shape_fn((rows, dim), |_| StandardNormal.sample(&mut r));
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v: f64| v / n);
    }
    m
}

pub fn word_symbol(i: usize) -> String {
    format!("w{i}")
}

impl World {
    pub fn new(spec: LatentSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.feature_dim;
        let phones = unit_rows(spec.n_phones, d, rng::derive_named(seed, "phones"));
        let speakers = unit_rows(spec.n_speakers, d, rng::derive_named(seed, "speakers"));
        let backgrounds = unit_rows(spec.n_backgrounds, d, rng::derive_named(seed, "backgrounds"));
        let mut r = rng::seeded(rng::derive_named(seed, "lexicon"));
        let lexicon = (0..spec.lexicon_size)
            .map(|_| {
                let len = r.random_range(spec.phones_per_word.0..=spec.phones_per_word.1);
                (0..len).map(|_| r.random_range(0..spec.n_phones)).collect()
            })
            .collect();
        let mut r = rng::seeded(rng::derive_named(seed, "contents"));
        let all_words: Vec<usize> = (0..spec.lexicon_size).collect();
        let contents = (0..spec.n_contents)
            .map(|_| {
                if spec.words_per_content <= spec.lexicon_size {
                    let mut pool = all_words.clone();
                    pool.shuffle(&mut r);
                    pool.truncate(spec.words_per_content);
                    pool
                } else {
                    (0..spec.words_per_content)
                        .map(|_| r.random_range(0..spec.lexicon_size))
                        .collect()
                }
            })
            .collect();
        Ok(World {
            spec,
            seed,
            phones,
            speakers,
            backgrounds,
            lexicon,
            contents,
        })
    }

    pub fn lexicon_symbols(&self) -> Vec<String> {
        (0..self.spec.lexicon_size).map(word_symbol).collect()
    }

    fn check_latents(&self, l: &Latents) -> Result<()> {
        let s = &self.spec;
        ensure!(
            l.speaker < s.n_speakers && l.content < s.n_contents && l.background < s.n_backgrounds,
            Error::InvalidArgument(format!("latents {l:?} out of range"))
        );
        if let Some(sw) = l.switch {
            ensure!(
                sw.to < s.factor_cardinality(sw.factor),
                Error::InvalidArgument(format!("switch target {} out of range", sw.to))
            );
        }
        Ok(())
    }

    /// Phone index per frame for `content`, with word boundaries, following
    /// the shared per-phone durations. Words cycle if `length` outlasts them.
    fn phone_track(
        &self,
        content: usize,
        durations: &[usize],
        length: usize,
    ) -> (Vec<usize>, Vec<(usize, usize, usize)>) {
        let words = &self.contents[content];
        let mut track = Vec::with_capacity(length);
        let mut spans = Vec::new();
        let mut phone_slot = 0;
        let mut w = 0;
        while track.len() < length {
            let word = words[w % words.len()];
            let start = track.len();
            for &p in &self.lexicon[word] {
                let dur = durations[phone_slot % durations.len()];
                phone_slot += 1;
                for _ in 0..dur {
                    if track.len() < length {
                        track.push(p);
                    }
                }
            }
            spans.push((word, start, track.len()));
            w += 1;
        }
        (track, spans)
    }

    /// Renders features for the given latents. Durations and noise come from
    /// `seed` only, so a switch leaves everything before it unchanged.
    pub fn render_features(
        &self,
        seed: u64,
        latents: &Latents,
        length: usize,
    ) -> Result<(Array2<f64>, Vec<Word>)> {
        self.check_latents(latents)?;
        ensure!(length >= 1, Error::InvalidArgument("length must be >= 1".into()));
        let s = &self.spec;
        let mut r = rng::seeded(seed);
        let durations: Vec<usize> = (0..length)
            .map(|_| r.random_range(s.frames_per_phone.0..=s.frames_per_phone.1))
            .collect();
        let noise_dist = Normal::new(0.0, s.noise_scale.max(0.0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let noise = Array2::from_shape_fn((length, s.feature_dim), |_| {
            if s.noise_scale > 0.0 {
                noise_dist.sample(&mut r)
            } else {
                0.0
            }
        });

        let (base_track, base_spans) = self.phone_track(latents.content, &durations, length);
        let (alt_track, alt_spans) = match latents.switch {
            Some(Switch {
                factor: Factor::Content,
                to,
                ..
            }) => {
                let (t, sp) = self.phone_track(to, &durations, length);
                (Some(t), sp)
            }
            _ => (None, Vec::new()),
        };
        let switch_frame = latents.switch.map_or(usize::MAX, |sw| sw.frame);

        let mut features = Array2::zeros((length, s.feature_dim));
        for t in 0..length {
            let after = t >= switch_frame;
            let switched = |f: Factor, base: usize| match latents.switch {
                Some(sw) if after && sw.factor == f => sw.to,
                _ => base,
            };
            let phone = match (&alt_track, after) {
                (Some(alt), true) => alt[t],
                _ => base_track[t],
            };
            let spk = switched(Factor::Speaker, latents.speaker);
            let bg = switched(Factor::Background, latents.background);
            let mut row = features.row_mut(t);
            row.assign(&noise.row(t));
            row.scaled_add(s.content_scale, &self.phones.row(phone));
            row.scaled_add(s.speaker_scale, &self.speakers.row(spk));
            row.scaled_add(s.background_scale, &self.backgrounds.row(bg));
            row.mapv_inplace(|v| v as f32 as f64);
        }

        let to_word = |&(w, a, b): &(usize, usize, usize)| Word {
            symbol: word_symbol(w),
            start: a as f64 * FRAME_SECONDS,
            end: b as f64 * FRAME_SECONDS,
        };
        let words = if alt_track.is_some() {
            let mut words: Vec<Word> = base_spans
                .iter()
                .filter(|sp| sp.2 <= switch_frame)
                .map(to_word)
                .collect();
            words.extend(alt_spans.iter().filter(|sp| sp.1 >= switch_frame).map(to_word));
            words
        } else {
            base_spans.iter().map(to_word).collect()
        };
        Ok((features, words))
    }

    pub fn utterance(
        &self,
        codebook: &Codebook,
        seed: u64,
        latents: Latents,
        length: usize,
    ) -> Result<FrameStream> {
        ensure!(
            codebook.dim() == self.spec.feature_dim,
            Error::ShapeMismatch(format!(
                "codebook dim {} vs feature_dim {}",
                codebook.dim(),
                self.spec.feature_dim
            ))
        );
        let (features, words) = self.render_features(seed, &latents, length)?;
        let codes = features.rows().into_iter().map(|f| codebook.quantize(f)).collect();
        let times = (0..length)
            .map(|t| (t as f64 * FRAME_SECONDS, (t + 1) as f64 * FRAME_SECONDS))
            .collect();
        Ok(FrameStream {
            codes,
            features,
            times,
            words,
            latents,
            seed,
        })
    }

    pub fn random_latents(&self, seed: u64) -> Latents {
        let mut r = rng::seeded(rng::derive_named(seed, "latents"));
        Latents {
            speaker: r.random_range(0..self.spec.n_speakers),
            content: r.random_range(0..self.spec.n_contents),
            background: r.random_range(0..self.spec.n_backgrounds),
            switch: None,
        }
    }

    /// Natural/perturbed pair: identical up to a switch frame drawn uniformly
    /// from `[T/4, 3T/4]`, after which `factor` takes a different value.
    pub fn pair(
        &self,
        codebook: &Codebook,
        seed: u64,
        factor: Factor,
        length: usize,
    ) -> Result<(FrameStream, FrameStream)> {
        let card = self.spec.factor_cardinality(factor);
        ensure!(
            card >= 2,
            Error::InvalidArgument(format!(
                "factor {} needs at least 2 values, spec has {card}",
                factor.name()
            ))
        );
        ensure!(length >= 1, Error::InvalidArgument("length must be >= 1".into()));
        let base = self.random_latents(seed);
        let mut r = rng::seeded(rng::derive_named(seed, "switch"));
        let lo = length / 4;
        let hi = (3 * length / 4).max(lo);
        let frame = r.random_range(lo..=hi);
        let current = match factor {
            Factor::Speaker => base.speaker,
            Factor::Background => base.background,
            Factor::Content => base.content,
        };
        let mut to = r.random_range(0..card - 1);
        if to >= current {
            to += 1;
        }
        let utt_seed = rng::derive_named(seed, "utterance");
        let natural = self.utterance(codebook, utt_seed, base, length)?;
        let perturbed = self.utterance(
            codebook,
            utt_seed,
            Latents {
                switch: Some(Switch { factor, frame, to }),
                ..base
            },
            length,
        )?;
        Ok((natural, perturbed))
    }

    /// Features from random utterances, for fitting the codebook stub.
    pub fn calibration_features(&self, seed: u64, n_utts: usize, length: usize) -> Result<Array2<f64>> {
        let mut rows = Vec::with_capacity(n_utts * length * self.spec.feature_dim);
        for i in 0..n_utts {
            let s = rng::derive(seed, i as u64);
            let (f, _) = self.render_features(s, &self.random_latents(s), length)?;
            rows.extend(f.iter().copied());
        }
        Ok(Array2::from_shape_vec((n_utts * length, self.spec.feature_dim), rows)
            .expect("row count matches"))
    }
}

/// Codebook fitted by k-means over calibration features, the stand-in for a
/// reconstruction-trained codec.
pub fn fit_codebook(world: &World, seed: u64, n_codes: usize, n_utts: usize, length: usize) -> Result<Codebook> {
    ensure!(
        n_codes >= 2,
        Error::InvalidArgument("n_codes must be at least 2".into())
    );
    let feats = world.calibration_features(rng::derive_named(seed, "calibration"), n_utts, length)?;
    let fit = kmeans::fit(feats.view(), n_codes, rng::derive_named(seed, "kmeans"), 100, 1e-6)?;
    Codebook::from_vectors(fit.centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    /// Inclusive frame-count range per utterance.
    pub length: (usize, usize),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_utterances: 200,
            length: (48, 64),
        }
    }
}

pub fn generate_corpus(
    world: &World,
    codebook: &Codebook,
    seed: u64,
    spec: &CorpusSpec,
) -> Result<Vec<FrameStream>> {
    ensure!(
        spec.length.0 >= 1 && spec.length.0 <= spec.length.1,
        Error::InvalidArgument("bad utterance length range".into())
    );
    (0..spec.n_utterances)
        .map(|i| {
            let s = rng::derive(seed, i as u64);
            let mut r = rng::seeded(rng::derive_named(s, "length"));
            let len = r.random_range(spec.length.0..=spec.length.1);
            world.utterance(codebook, s, world.random_latents(s), len)
        })
        .collect()
}

/// Mean of each factor's contribution, for oracle scorers and tests.
pub fn composite(world: &World, l: &Latents, phone: usize) -> Array1<f64> {
    let s = &world.spec;
    let mut v = world.phones.row(phone).to_owned() * s.content_scale;
    v.scaled_add(s.speaker_scale, &world.speakers.row(l.speaker));
    v.scaled_add(s.background_scale, &world.backgrounds.row(l.background));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> LatentSpec {
        LatentSpec {
            noise_scale: 0.0,
            ..LatentSpec::default()
        }
    }

    #[test]
    fn codebook_determinism() {
        let a = make_codebook(3, 32, 8).unwrap();
        let b = make_codebook(3, 32, 8).unwrap();
        let c = make_codebook(4, 32, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert!(a.vectors().iter().zip(c.vectors().iter()).any(|(x, y)| x != y));
        let tiny = make_codebook(0, 2, 2).unwrap();
        assert_eq!(tiny.vectors().dim(), (2, 2));
        assert_ne!(tiny.vectors().row(0), tiny.vectors().row(1));
        assert!(make_codebook(0, 1, 2).is_err());
    }

    #[test]
    fn utterance_is_deterministic() {
        let world = World::new(quiet_spec(), 1).unwrap();
        let cb = make_codebook(2, 64, world.spec.feature_dim).unwrap();
        let l = Latents { speaker: 1, content: 2, background: 0, switch: None };
        let a = world.utterance(&cb, 9, l, 40).unwrap();
        let b = world.utterance(&cb, 9, l, 40).unwrap();
        assert_eq!(a, b);
        a.validate(64).unwrap();
        let one = world.utterance(&cb, 9, l, 1).unwrap();
        assert_eq!(one.len(), 1);
        one.validate(64).unwrap();
    }

    #[test]
    fn planted_codebook_recovers_index() {
        // Codebook rows are the exact noiseless composites for one speaker and
        // background; each frame must quantize to its phone's row.
        let world = World::new(quiet_spec(), 5).unwrap();
        let l = Latents { speaker: 3, content: 4, background: 1, switch: None };
        let rows: Vec<f64> = (0..world.spec.n_phones)
            .flat_map(|p| composite(&world, &l, p).mapv(|v| v as f32 as f64).to_vec())
            .collect();
        let cb = Codebook::from_vectors(
            Array2::from_shape_vec((world.spec.n_phones, world.spec.feature_dim), rows).unwrap(),
        )
        .unwrap();
        let utt = world.utterance(&cb, 17, l, 30).unwrap();
        let durations_seed = 17;
        let mut r = rng::seeded(durations_seed);
        let durations: Vec<usize> = (0..30)
            .map(|_| r.random_range(world.spec.frames_per_phone.0..=world.spec.frames_per_phone.1))
            .collect();
        let (track, _) = world.phone_track(l.content, &durations, 30);
        let expect: Vec<u32> = track.iter().map(|&p| p as u32).collect();
        assert_eq!(utt.codes, expect);
    }

    #[test]
    fn pair_shares_prefix_and_diverges() {
        let world = World::new(quiet_spec(), 2).unwrap();
        let cb = fit_codebook(&world, 1, 64, 40, 40).unwrap();
        for seed in 0..20 {
            let (nat, pert) = world.pair(&cb, seed, Factor::Speaker, 48).unwrap();
            let sw = pert.latents.switch.unwrap();
            assert!(sw.frame >= 12 && sw.frame <= 36);
            assert_ne!(sw.to, nat.latents.speaker);
            assert_eq!(nat.codes[..sw.frame], pert.codes[..sw.frame]);
            assert_eq!(nat.features.row(0), pert.features.row(0));
            assert!(nat.codes[sw.frame..]
                .iter()
                .zip(&pert.codes[sw.frame..])
                .any(|(a, b)| a != b));
        }
    }

    #[test]
    fn pair_requires_two_values() {
        let spec = LatentSpec { n_speakers: 1, ..quiet_spec() };
        let world = World::new(spec, 2).unwrap();
        let cb = make_codebook(1, 16, world.spec.feature_dim).unwrap();
        assert!(world.pair(&cb, 0, Factor::Speaker, 20).is_err());
        assert!(world.pair(&cb, 0, Factor::Content, 20).is_ok());
    }

    #[test]
    fn world_vectors_are_unit_norm() {
        let world = World::new(LatentSpec::default(), 11).unwrap();
        for m in [&world.phones, &world.speakers, &world.backgrounds] {
            for row in m.rows() {
                assert!((row.dot(&row) - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(world, World::new(LatentSpec::default(), 11).unwrap());
    }

    #[test]
    fn out_of_range_latents_rejected() {
        let world = World::new(quiet_spec(), 1).unwrap();
        let cb = make_codebook(2, 16, world.spec.feature_dim).unwrap();
        let l = Latents { speaker: 99, content: 0, background: 0, switch: None };
        assert!(world.utterance(&cb, 0, l, 10).is_err());
    }
}
