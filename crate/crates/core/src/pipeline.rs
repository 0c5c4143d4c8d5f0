//! End-to-end assembly from a [`RunConfig`]: world, codebook, corpus,
//! centroids, projection and the initialized model, plus the evaluation
//! sets. The CLI stages and the acceptance experiments share these.

use crate::config::{InitKind, RunConfig};
use crate::distill::{self, Centroids, CoarseMap, Projection};
use crate::error::Result;
use crate::eval::PreferencePair;
use crate::interleave::{self, MixedSequence};
use crate::model::{ModelConfig, ModelState};
use crate::rng;
use crate::synthgen::{self, Codebook, Factor, FrameStream, World};
use crate::vocab::UnifiedVocab;

pub fn world(cfg: &RunConfig) -> Result<World> {
    World::new(cfg.world.clone(), cfg.seeds.world)
}

pub fn codebook(cfg: &RunConfig, world: &World) -> Result<Codebook> {
    synthgen::fit_codebook(
        world,
        cfg.seeds.codebook,
        cfg.codebook.n_codes,
        cfg.codebook.calib_utterances,
        cfg.codebook.calib_length,
    )
}

pub fn vocab(world: &World, n_codes: usize) -> Result<UnifiedVocab> {
    UnifiedVocab::build(&world.lexicon_symbols(), n_codes)
}

pub fn corpus(cfg: &RunConfig, world: &World, codebook: &Codebook) -> Result<Vec<FrameStream>> {
    synthgen::generate_corpus(world, codebook, cfg.seeds.corpus, &cfg.corpus)
}

pub fn model_config(cfg: &RunConfig, vocab: &UnifiedVocab) -> ModelConfig {
    let m = &cfg.model;
    ModelConfig {
        d_model: m.d_model,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        d_ff: m.d_ff,
        max_seq_len: m.max_seq_len,
        vocab_size: vocab.total_size(),
        n_codes: vocab.n_codes(),
        n_coarse: cfg.distill.n_coarse,
        d_ssl: cfg.world.feature_dim,
    }
}

/// Everything fitted from the corpus before training.
#[derive(Debug, Clone)]
pub struct Distilled {
    pub centroids: Centroids,
    pub projection: Projection,
    pub sigma: f64,
    pub embeddings: ndarray::Array2<f64>,
    pub coarse: CoarseMap,
}

pub fn distill(cfg: &RunConfig, corpus: &[FrameStream], n_codes: usize) -> Result<Distilled> {
    distill_from_centroids(cfg, distill::fit_centroids(corpus, n_codes)?)
}

pub fn distill_from_centroids(cfg: &RunConfig, centroids: Centroids) -> Result<Distilled> {
    let d = &cfg.distill;
    let mut projection = distill::fit_projection(
        &centroids,
        cfg.model.d_model,
        d.init_std,
        d.ridge,
        rng::derive_named(cfg.seeds.model, "projection"),
    )?;
    projection.trainable = d.proj_trainable;
    let sigma = d.sigma_rel / 0.01 * distill::default_sigma(&centroids, &projection);
    let embeddings = distill::init_embeddings(
        &centroids,
        &projection,
        sigma,
        rng::derive_named(cfg.seeds.model, "embedding-noise"),
    )?;
    let coarse = distill::fit_coarse(
        &centroids,
        d.n_coarse,
        rng::derive_named(cfg.seeds.model, "coarse"),
        100,
        1e-9,
    )?
    .map;
    Ok(Distilled {
        centroids,
        projection,
        sigma,
        embeddings,
        coarse,
    })
}

/// Fresh model with the projection and coarse map installed and, for the
/// distilled init, the speech block replaced by the distilled rows.
pub fn init_state(cfg: &RunConfig, vocab: &UnifiedVocab, distilled: &Distilled) -> Result<ModelState> {
    let mut state = ModelState::new(model_config(cfg, vocab), cfg.seeds.model)?;
    state.set_projection(&distilled.projection)?;
    state.set_coarse(distilled.coarse.clone())?;
    if cfg.distill.init == InitKind::Distilled {
        state.set_speech_embeddings(vocab.speech_range().start as usize, &distilled.embeddings)?;
    }
    state.proj_trainable = cfg.distill.proj_trainable;
    state.provenance = serde_json::json!({ "config_hash": cfg.hash() });
    Ok(state)
}

/// Shared world, codebook, vocabulary, corpus and fitted distillation.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub world: World,
    pub codebook: Codebook,
    pub vocab: UnifiedVocab,
    pub corpus: Vec<FrameStream>,
    pub distilled: Distilled,
}

impl Experiment {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let world = world(cfg)?;
        let codebook = codebook(cfg, &world)?;
        let vocab = vocab(&world, codebook.n_codes())?;
        let corpus = corpus(cfg, &world, &codebook)?;
        let distilled = distill(cfg, &corpus, codebook.n_codes())?;
        Ok(Experiment {
            world,
            codebook,
            vocab,
            corpus,
            distilled,
        })
    }

    pub fn init_state(&self, cfg: &RunConfig) -> Result<ModelState> {
        init_state(cfg, &self.vocab, &self.distilled)
    }
}

/// Speech-only natural/perturbed pairs for one factor.
pub fn preference_pairs(
    cfg: &RunConfig,
    world: &World,
    codebook: &Codebook,
    vocab: &UnifiedVocab,
    factor: Factor,
) -> Result<Vec<PreferencePair>> {
    let base = rng::derive_named(cfg.seeds.eval, factor.name());
    (0..cfg.eval.n_pairs)
        .map(|i| {
            let (natural, perturbed) =
                world.pair(codebook, rng::derive(base, i as u64), factor, cfg.eval.pair_length)?;
            Ok(PreferencePair {
                natural: interleave::speech_only(&natural, vocab)?,
                perturbed: interleave::speech_only(&perturbed, vocab)?,
                factor,
                natural_latents: natural.latents,
                perturbed_latents: perturbed.latents,
            })
        })
        .collect()
}

/// Held-out speech-only utterances with their planted classes.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub inputs: Vec<MixedSequence>,
    pub content: Vec<usize>,
    pub speaker: Vec<usize>,
}

pub fn probe_set(cfg: &RunConfig, world: &World, codebook: &Codebook, vocab: &UnifiedVocab) -> Result<ProbeSet> {
    let base = rng::derive_named(cfg.seeds.eval, "probe");
    let mut set = ProbeSet {
        inputs: Vec::new(),
        content: Vec::new(),
        speaker: Vec::new(),
    };
    for i in 0..cfg.eval.probe_examples {
        let s = rng::derive(base, i as u64);
        let stream = world.utterance(codebook, s, world.random_latents(s), cfg.eval.probe_length)?;
        set.inputs.push(interleave::speech_only(&stream, vocab)?);
        set.content.push(stream.latents.content);
        set.speaker.push(stream.latents.speaker);
    }
    Ok(set)
}
