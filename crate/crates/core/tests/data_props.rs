//! Vocabulary layout, k-means and synthetic-world properties.

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use speechlm::kmeans;
use speechlm::rng;
use speechlm::synthgen::{self, Factor, LatentSpec, World};
use speechlm::vocab::UnifiedVocab;

fn symbols(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocab_layout_is_dense_and_padded(n_text in 1usize..200, n_codes in 1usize..3000) {
        let v = UnifiedVocab::build(&symbols(n_text), n_codes).unwrap();
        let used = n_text + n_codes + 4;
        prop_assert_eq!(v.total_size(), used.div_ceil(8) * 8);
        prop_assert_eq!(v.speech_range().len(), n_codes);
        let mut seen = vec![0u8; v.total_size()];
        for s in v.text_tokens() {
            seen[v.text_id(s).unwrap() as usize] += 1;
        }
        for c in 0..n_codes {
            let id = v.speech_id(c).unwrap();
            prop_assert_eq!(v.code_of(id).unwrap(), c);
            seen[id as usize] += 1;
        }
        for id in [v.text_delim_id(), v.speech_delim_id(), v.eos_id(), v.pad_id()] {
            seen[id as usize] += 1;
        }
        prop_assert!(seen[..used].iter().all(|&n| n == 1));
        prop_assert!(seen[used..].iter().all(|&n| n == 0));
        prop_assert!(v.code_of(v.text_delim_id()).is_err());
    }

    #[test]
    fn text_ids_do_not_depend_on_the_speech_block(n_text in 1usize..50, a in 1usize..500, b in 1usize..500) {
        let syms = symbols(n_text);
        let va = UnifiedVocab::build(&syms, a).unwrap();
        let vb = UnifiedVocab::build(&syms, b).unwrap();
        let text = syms.join(" ");
        prop_assert_eq!(va.encode_text(&text).unwrap(), vb.encode_text(&text).unwrap());
    }

    #[test]
    fn vocab_file_round_trips(n_text in 1usize..40, n_codes in 1usize..300) {
        let v = UnifiedVocab::build(&symbols(n_text), n_codes).unwrap();
        prop_assert_eq!(UnifiedVocab::from_text(&v.to_text()).unwrap(), v);
    }
}

/// Well-separated planted clusters: every restart-free fit recovers the
/// partition, and the centers are the cluster means.
#[test]
fn kmeans_recovers_planted_clusters() {
    let (k, per, d) = (6, 40, 5);
    let mut r = rng::seeded(3);
    let centers = Array2::from_shape_fn((k, d), |(i, j)| if j == i % d { 20.0 * (1 + i / d) as f64 } else { 0.0 });
    let mut pts = Array2::zeros((k * per, d));
    let mut truth = Vec::new();
    for c in 0..k {
        for i in 0..per {
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut r);
                pts[[c * per + i, j]] = centers[[c, j]] + 0.3 * z;
            }
            truth.push(c);
        }
    }
    let fit = kmeans::fit(pts.view(), k, 11, 100, 1e-9).unwrap();
    // Same partition up to relabeling.
    for a in 0..pts.nrows() {
        for b in 0..pts.nrows() {
            assert_eq!(truth[a] == truth[b], fit.assignment[a] == fit.assignment[b]);
        }
    }
    for (c, center) in fit.centers.rows().into_iter().enumerate() {
        let members: Vec<usize> = (0..pts.nrows()).filter(|&i| fit.assignment[i] == c).collect();
        for j in 0..d {
            let m = members.iter().map(|&i| pts[[i, j]]).sum::<f64>() / members.len() as f64;
            assert!((center[j] - m).abs() < 1e-9);
        }
    }
}

#[test]
fn nearest_matches_brute_force() {
    let mut r = rng::seeded(8);
    let centers = Array2::from_shape_fn((17, 4), |_| r.random::<f64>());
    for _ in 0..2000 {
        let x = ndarray::Array1::from_shape_fn(4, |_| r.random::<f64>());
        let (k, dist) = kmeans::nearest(centers.view(), x.view());
        let dists: Vec<f64> = centers.rows().into_iter().map(|c| kmeans::sq_dist(c, x.view())).collect();
        let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(dist, best);
        assert_eq!(k, dists.iter().position(|&v| v == best).unwrap());
    }
}

#[test]
fn codes_are_nearest_codebook_rows() {
    let world = World::new(LatentSpec::default(), 2).unwrap();
    let cb = synthgen::fit_codebook(&world, 4, 32, 30, 32).unwrap();
    let s = world.utterance(&cb, 9, world.random_latents(9), 50).unwrap();
    for (t, &c) in s.codes.iter().enumerate() {
        let (k, _) = kmeans::nearest(cb.vectors().view(), s.features.row(t));
        assert_eq!(c as usize, k);
    }
}

#[test]
fn switched_factor_changes_only_after_the_switch() {
    let spec = LatentSpec {
        noise_scale: 0.0,
        ..LatentSpec::default()
    };
    let world = World::new(spec, 5).unwrap();
    let cb = synthgen::make_codebook(1, 64, world.spec.feature_dim).unwrap();
    for factor in Factor::ALL {
        for seed in 0..20 {
            let (nat, per) = world.pair(&cb, seed, factor, 40).unwrap();
            let sw = per.latents.switch.unwrap();
            assert!((10..=30).contains(&sw.frame));
            for t in 0..40 {
                let same = nat.features.row(t) == per.features.row(t);
                if t < sw.frame {
                    assert!(same, "{factor:?} seed {seed} frame {t}");
                }
            }
            // Speaker and background shift every post-switch frame.
            if factor != Factor::Content {
                assert!((sw.frame..40).all(|t| nat.features.row(t) != per.features.row(t)));
            }
        }
    }
}

#[test]
fn corpus_is_reproducible_per_seed() {
    let world = World::new(LatentSpec::default(), 1).unwrap();
    let cb = synthgen::make_codebook(2, 16, world.spec.feature_dim).unwrap();
    let spec = synthgen::CorpusSpec {
        n_utterances: 12,
        length: (5, 9),
    };
    let a = synthgen::generate_corpus(&world, &cb, 3, &spec).unwrap();
    let b = synthgen::generate_corpus(&world, &cb, 3, &spec).unwrap();
    let c = synthgen::generate_corpus(&world, &cb, 4, &spec).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|s| (5..=9).contains(&s.len())));
}
