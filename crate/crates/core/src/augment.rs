//! Multi-rate thinning and span erasure of audio token streams.
//!
//! A rate `r` keeps original indices `t` with `t % r == 0`. Erasure spans are
//! given in thinned coordinates (erasure follows thinning). Labels are the
//! next *surviving* token.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThinSpec {
    pub rates: Vec<usize>,
    pub p_erase: f64,
    /// Expected erased span length, in thinned frames.
    pub span_mean: f64,
}

impl Default for ThinSpec {
    fn default() -> Self {
        ThinSpec {
            rates: vec![1, 2, 3, 4],
            p_erase: 0.1,
            span_mean: 3.0,
        }
    }
}

impl ThinSpec {
    /// No thinning, no erasure.
    pub fn identity() -> Self {
        ThinSpec {
            rates: vec![1],
            p_erase: 0.0,
            span_mean: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.rates.is_empty() && self.rates.iter().all(|&r| r >= 1),
            Error::InvalidArgument("rates must be non-empty and all >= 1".into())
        );
        ensure!(
            (0.0..=1.0).contains(&self.p_erase),
            Error::InvalidArgument(format!("p_erase {} outside [0, 1]", self.p_erase))
        );
        ensure!(
            self.span_mean >= 1.0 && self.span_mean.is_finite(),
            Error::InvalidArgument(format!("span_mean {} must be >= 1", self.span_mean))
        );
        Ok(())
    }
}

/// `(start, len)` in thinned coordinates.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinnedSequence {
    pub kept_positions: Vec<usize>,
    pub tokens: Vec<u32>,
    /// `labels[i] = tokens[i + 1]`; the final entry is 0 and masked.
    pub labels: Vec<u32>,
    pub label_mask: Vec<bool>,
}

pub fn thinned_len(t: usize, r: usize) -> usize {
    t.div_ceil(r)
}

fn check_spans(spans: &[Span], n: usize) -> Result<Vec<Span>> {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    for &(start, len) in &sorted {
        ensure!(
            len >= 1 && start + len <= n,
            Error::InvalidArgument(format!(
                "erase span ({start}, {len}) outside thinned length {n}"
            ))
        );
    }
    for w in sorted.windows(2) {
        ensure!(
            w[0].0 + w[0].1 <= w[1].0,
            Error::InvalidArgument(format!("erase spans {:?} and {:?} overlap", w[0], w[1]))
        );
    }
    Ok(sorted)
}

/// Original indices that survive thinning at rate `r` and erasure of `spans`.
pub fn kept_positions(t: usize, r: usize, spans: &[Span]) -> Result<Vec<usize>> {
    ensure!(r >= 1, Error::InvalidArgument("rate must be >= 1".into()));
    let n = thinned_len(t, r);
    let spans = check_spans(spans, n)?;
    let mut erased = vec![false; n];
    for (start, len) in spans {
        erased[start..start + len].iter_mut().for_each(|e| *e = true);
    }
    Ok((0..n).filter(|&i| !erased[i]).map(|i| i * r).collect())
}

pub fn thin(tokens: &[u32], r: usize, erase_spans: &[Span]) -> Result<ThinnedSequence> {
    let kept = kept_positions(tokens.len(), r, erase_spans)?;
    let surviving: Vec<u32> = kept.iter().map(|&p| tokens[p]).collect();
    let n = surviving.len();
    let mut labels = vec![0; n];
    let mut label_mask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        labels[i] = surviving[i + 1];
        label_mask[i] = true;
    }
    Ok(ThinnedSequence {
        kept_positions: kept,
        tokens: surviving,
        labels,
        label_mask,
    })
}

/// Draws a rate uniformly from `spec.rates`, then walks the thinned
/// sequence: at each free position a span starts with probability
/// `p_erase`, with geometric length of mean `span_mean`, clipped at the end.
pub fn sample_augmentation(spec: &ThinSpec, t: usize, seed: u64) -> Result<(usize, Vec<Span>)> {
    spec.validate()?;
    ensure!(t >= 1, Error::InvalidArgument("length must be >= 1".into()));
    let mut r = rng::seeded(seed);
    let rate = spec.rates[r.random_range(0..spec.rates.len())];
    let n = thinned_len(t, rate);
    let mut spans = Vec::new();
    if spec.p_erase > 0.0 {
        let geom = Geometric::new(1.0 / spec.span_mean)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut i = 0;
        while i < n {
            if r.random_bool(spec.p_erase) {
                let len = (1 + geom.sample(&mut r) as usize).min(n - i);
                spans.push((i, len));
                i += len;
            } else {
                i += 1;
            }
        }
    }
    Ok((rate, spans))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(n: usize) -> Vec<u32> {
        (100..100 + n as u32).collect()
    }

    #[test]
    fn rate_two_keeps_even_indices() {
        let out = thin(&toks(8), 2, &[]).unwrap();
        assert_eq!(out.kept_positions, vec![0, 2, 4, 6]);
    }

    #[test]
    fn rate_one_is_identity() {
        let t = toks(5);
        let out = thin(&t, 1, &[]).unwrap();
        assert_eq!(out.tokens, t);
        assert_eq!(&out.labels[..4], &t[1..]);
        assert_eq!(out.label_mask, vec![true, true, true, true, false]);
    }

    #[test]
    fn rate_three_with_erasure() {
        // Thinned originals {0,3,6,9}; erasing thinned slot 1 drops 3.
        let t = toks(10);
        let out = thin(&t, 3, &[(1, 1)]).unwrap();
        assert_eq!(out.kept_positions, vec![0, 6, 9]);
        assert_eq!(&out.labels[..2], &[t[6], t[9]]);
        assert_eq!(out.label_mask, vec![true, true, false]);
    }

    #[test]
    fn overlapping_or_out_of_bounds_spans_rejected() {
        assert!(thin(&toks(10), 1, &[(2, 3), (4, 1)]).is_err());
        assert!(thin(&toks(10), 2, &[(4, 2)]).is_err());
        assert!(thin(&toks(10), 1, &[(3, 0)]).is_err());
        assert!(thin(&toks(10), 0, &[]).is_err());
        assert!(thin(&toks(10), 1, &[(4, 1), (2, 2)]).is_ok());
    }

    #[test]
    fn degenerate_specs() {
        let none = ThinSpec { p_erase: 0.0, ..ThinSpec::default() };
        let unit = ThinSpec { rates: vec![1], ..ThinSpec::default() };
        for seed in 0..500 {
            assert!(sample_augmentation(&none, 30, seed).unwrap().1.is_empty());
            assert_eq!(sample_augmentation(&unit, 30, seed).unwrap().0, 1);
        }
        let (r, spans) = sample_augmentation(&ThinSpec::default(), 1, 3).unwrap();
        assert!(ThinSpec::default().rates.contains(&r));
        assert!(spans.iter().all(|&(s, l)| s == 0 && l == 1));
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let spec = ThinSpec { p_erase: 0.3, ..ThinSpec::default() };
        for seed in 0..200 {
            let a = sample_augmentation(&spec, 37, seed).unwrap();
            assert_eq!(a, sample_augmentation(&spec, 37, seed).unwrap());
            let thinned = thin(&toks(37), a.0, &a.1).unwrap();
            let erased: usize = a.1.iter().map(|s| s.1).sum();
            assert_eq!(thinned.tokens.len(), thinned_len(37, a.0) - erased);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let bad = ThinSpec { rates: vec![], ..ThinSpec::default() };
        assert!(sample_augmentation(&bad, 10, 0).is_err());
        let bad = ThinSpec { p_erase: 1.5, ..ThinSpec::default() };
        assert!(sample_augmentation(&bad, 10, 0).is_err());
        let bad = ThinSpec { span_mean: 0.5, ..ThinSpec::default() };
        assert!(sample_augmentation(&bad, 10, 0).is_err());
    }
}
