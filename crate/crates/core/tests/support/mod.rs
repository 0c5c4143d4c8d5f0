//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use speechlm::distill::CoarseMap;
use speechlm::interleave::{self, InterleaveConfig, MixedSequence, Modality};
use speechlm::model::{total_loss, AuxInputs, LossWeights, ModelConfig, Params};
use speechlm::synthgen::{make_codebook, FrameStream, LatentSpec, World};
use speechlm::vocab::UnifiedVocab;
use speechlm::augment::{Span, ThinSpec};
use speechlm::rng;

pub const H: f64 = 1e-5;
// Central differences at this step carry ~1e-10 absolute rounding noise for
// losses of order 1, so smaller gradients are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

pub struct Fixture {
    pub cfg: ModelConfig,
    pub params: Params,
    pub seq: MixedSequence,
    pub stream: FrameStream,
    pub coarse: CoarseMap,
}

/// `V = 64`, 2 layers, `d_model = 16`, interleaved text and speech.
pub fn fixture(seed: u64, length: usize, augment: bool) -> Fixture {
    let spec = LatentSpec {
        lexicon_size: 8,
        words_per_content: 4,
        feature_dim: 6,
        ..LatentSpec::default()
    };
    let world = World::new(spec, seed).unwrap();
    let n_codes = 52;
    let vocab = UnifiedVocab::build(&world.lexicon_symbols(), n_codes).unwrap();
    assert_eq!(vocab.total_size(), 64);
    let cb = make_codebook(seed, n_codes, 6).unwrap();
    let stream = world.utterance(&cb, seed, world.random_latents(seed), length).unwrap();
    let mut seq = interleave::interleave(&stream, &vocab, &InterleaveConfig::default(), seed)
        .unwrap()
        .sequence;
    if augment {
        let spec = ThinSpec {
            rates: vec![2],
            p_erase: 0.1,
            span_mean: 2.0,
        };
        seq = interleave::apply_audio_augment(&seq, &spec, seed).unwrap();
    }
    assert!(seq.modality.contains(&Modality::Text));
    assert!(seq.modality.contains(&Modality::Audio));

    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 80,
        vocab_size: 64,
        n_codes,
        n_coarse: 4,
        d_ssl: 6,
    };
    let mut params = Params::init(&cfg, seed).unwrap();
    // Move off the symmetric init so every group has generic gradients.
    let mut r = rng::seeded(seed ^ 0xa5a5);
    params.for_each_mut(|t| {
        for v in t.data.iter_mut() {
            *v += 0.3 * (r.random::<f64>() - 0.5);
        }
    });
    let coarse = CoarseMap {
        bucket_of: (0..n_codes as u32).map(|c| c % 4).collect(),
        k: 4,
        bucket_centers: Array2::zeros((4, 6)),
    };
    Fixture {
        cfg,
        params,
        seq,
        stream,
        coarse,
    }
}

/// All four loss terms active.
pub fn weights() -> LossWeights {
    LossWeights {
        main: 1.0,
        ssl: 0.7,
        coarse: 0.5,
        next: 0.3,
        aux_delay: 1,
    }
}

/// Worst relative error per parameter tensor of the total-loss gradient.
pub fn max_rel_error(fx: &Fixture, weights: &LossWeights, proj_trainable: bool) -> Vec<(String, f64)> {
    let aux = AuxInputs {
        features: Some(&fx.stream.features),
        coarse: Some(&fx.coarse),
        proj_trainable,
    };
    let out = total_loss(&fx.cfg, &fx.params, &fx.seq, weights, &aux, true).unwrap();
    let t = out.terms;
    assert!(t.main > 0.0 && t.ssl > 0.0 && t.coarse > 0.0 && t.next > 0.0, "inactive term: {t:?}");
    let grads = out.grads.unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let loss_at = |p: &Params| total_loss(&fx.cfg, p, &fx.seq, weights, &aux, false).unwrap().terms.total;
    let mut probe = fx.params.clone();
    let mut report = Vec::new();
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            let orig = fx.params.tensors()[ti].data[i];
            let set = |p: &mut Params, v: f64| {
                let mut k = 0;
                p.for_each_mut(|t| {
                    if k == ti {
                        t.data[i] = v;
                    }
                    k += 1;
                });
            };
            set(&mut probe, orig + H);
            let up = loss_at(&probe);
            set(&mut probe, orig - H);
            let down = loss_at(&probe);
            set(&mut probe, orig);
            let numeric = (up - down) / (2.0 * H);
            // Frozen projection: the analytic gradient is zero by contract.
            if !proj_trainable && name.starts_with("proj_") {
                assert_eq!(g[i], 0.0, "{name}[{i}] must not receive gradient");
                continue;
            }
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
        report.push((name.clone(), worst));
    }
    report
}


/// Every set of non-overlapping spans over `0..n`, as `(start, len)` lists.
pub fn all_span_sets(n: usize) -> Vec<Vec<Span>> {
    fn rec(pos: usize, n: usize, cur: &mut Vec<Span>, out: &mut Vec<Vec<Span>>) {
        if pos >= n {
            out.push(cur.clone());
            return;
        }
        rec(pos + 1, n, cur, out);
        for len in 1..=n - pos {
            cur.push((pos, len));
            rec(pos + len, n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), &mut out);
    out
}

/// Filter indices divisible by `r`, drop erased thinned slots, relabel.
pub fn thin_reference(tokens: &[u32], r: usize, spans: &[Span]) -> (Vec<u32>, Vec<u32>, Vec<bool>) {
    let thinned: Vec<u32> = tokens.iter().enumerate().filter(|(i, _)| i % r == 0).map(|(_, &t)| t).collect();
    let kept: Vec<u32> = thinned
        .iter()
        .enumerate()
        .filter(|(j, _)| !spans.iter().any(|&(s, l)| *j >= s && *j < s + l))
        .map(|(_, &t)| t)
        .collect();
    let n = kept.len();
    let labels = (0..n).map(|i| if i + 1 < n { kept[i + 1] } else { 0 }).collect();
    let mask = (0..n).map(|i| i + 1 < n).collect();
    (kept, labels, mask)
}

