//! Pairwise preference accuracy, linear probes and the auxiliary-loss
//! ablation protocol.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::interleave::MixedSequence;
use crate::model::{self, pooled_hidden, ModelState, TrainConfig, TrainData, Trainer};
use crate::rng;
use crate::scoring;
use crate::synthgen::{Factor, Latents};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub natural: MixedSequence,
    pub perturbed: MixedSequence,
    pub factor: Factor,
    /// Planted latents of each side, used only by oracle scorers.
    pub natural_latents: Latents,
    pub perturbed_latents: Latents,
}

impl PreferencePair {
    pub fn swapped(&self) -> Self {
        PreferencePair {
            natural: self.perturbed.clone(),
            perturbed: self.natural.clone(),
            factor: self.factor,
            natural_latents: self.perturbed_latents,
            perturbed_latents: self.natural_latents,
        }
    }
}

/// Anything that assigns a plausibility score to a sequence; higher wins.
pub trait Scorer {
    fn score(&self, seq: &MixedSequence, latents: &Latents) -> Result<f64>;
}

impl Scorer for ModelState {
    fn score(&self, seq: &MixedSequence, _: &Latents) -> Result<f64> {
        Ok(scoring::score(self, seq, false)?.score)
    }
}

impl<F: Fn(&MixedSequence, &Latents) -> Result<f64>> Scorer for F {
    fn score(&self, seq: &MixedSequence, latents: &Latents) -> Result<f64> {
        self(seq, latents)
    }
}

/// Knows which side carries a planted switch.
pub fn oracle_scorer(_: &MixedSequence, latents: &Latents) -> Result<f64> {
    Ok(if latents.switch.is_some() { -1.0 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub index: usize,
    pub natural: f64,
    pub perturbed: f64,
    pub credit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub accuracy: f64,
    /// 95% percentile bootstrap interval.
    pub ci: (f64, f64),
    pub n_scored: usize,
    pub n_excluded: usize,
    pub pairs: Vec<PairScore>,
}

pub const BOOTSTRAP_SAMPLES: usize = 10_000;

pub fn bootstrap_ci(credits: &[f64], samples: usize, seed: u64) -> (f64, f64) {
    if credits.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut r = rng::seeded(seed);
    let n = credits.len();
    let mut means: Vec<f64> = (0..samples)
        .map(|_| (0..n).map(|_| credits[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * samples as f64).floor() as usize).min(samples - 1)];
    (at(0.025), at(0.975))
}

/// Win = natural scores strictly higher, tie = 0.5. Pairs whose scoring
/// fails or is non-finite are excluded and counted.
pub fn preference_accuracy<S: Scorer + ?Sized>(
    scorer: &S,
    pairs: &[PreferencePair],
    bootstrap_seed: u64,
) -> Result<PreferenceReport> {
    ensure!(!pairs.is_empty(), Error::InvalidArgument("no preference pairs".into()));
    let mut scored = Vec::with_capacity(pairs.len());
    let mut excluded = 0;
    for (index, p) in pairs.iter().enumerate() {
        let a = scorer.score(&p.natural, &p.natural_latents);
        let b = scorer.score(&p.perturbed, &p.perturbed_latents);
        match (a, b) {
            (Ok(natural), Ok(perturbed)) if natural.is_finite() && perturbed.is_finite() => {
                let credit = if natural > perturbed {
                    1.0
                } else if natural == perturbed {
                    0.5
                } else {
                    0.0
                };
                scored.push(PairScore {
                    index,
                    natural,
                    perturbed,
                    credit,
                });
            }
            _ => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} of {} preference pairs were unscorable and excluded", pairs.len());
    }
    ensure!(
        !scored.is_empty(),
        Error::InvalidArgument("every preference pair was unscorable".into())
    );
    let credits: Vec<f64> = scored.iter().map(|s| s.credit).collect();
    Ok(PreferenceReport {
        accuracy: credits.iter().sum::<f64>() / credits.len() as f64,
        ci: bootstrap_ci(&credits, BOOTSTRAP_SAMPLES, bootstrap_seed),
        n_scored: scored.len(),
        n_excluded: excluded,
        pairs: scored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Planted content class.
    Content,
    /// Planted speaker class.
    ProsodyAnalog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTask {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Stop once the training loss improves by less than this.
    pub tol: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 500,
            lr: 0.5,
            l2: 1e-3,
            tol: 1e-7,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
}

/// Mean-pooled hidden states over audio positions, one row per sequence.
pub fn probe_features(state: &ModelState, seqs: &[MixedSequence]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((seqs.len(), state.config.d_model));
    for (i, s) in seqs.iter().enumerate() {
        let f = model::forward(state, &s.ids)?;
        out.row_mut(i).assign(&pooled_hidden(&f.hidden, &s.audio_mask()));
    }
    Ok(out)
}

fn accuracy(w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>, y: &[usize]) -> f64 {
    let logits = x.dot(w) + b;
    let hits = logits
        .rows()
        .into_iter()
        .zip(y)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    hits as f64 / y.len() as f64
}

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent, deterministic per `split_seed`.
pub fn linear_probe(task: &ProbeTask, cfg: &ProbeConfig, split_seed: u64) -> Result<ProbeResult> {
    let n = task.labels.len();
    ensure!(
        task.features.nrows() == n && n >= 2,
        Error::ShapeMismatch("probe features and labels disagree".into())
    );
    let n_classes = task.labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; n_classes];
        task.labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    ensure!(distinct >= 2, Error::InvalidArgument("probe needs at least 2 classes".into()));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::seeded(split_seed));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let (tr, te) = idx.split_at(n_train);
    let xtr = task.features.select(Axis(0), tr);
    let xte = task.features.select(Axis(0), te);
    let ytr: Vec<usize> = tr.iter().map(|&i| task.labels[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| task.labels[i]).collect();

    let mean = xtr.mean_axis(Axis(0)).unwrap();
    let std = xtr.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let xtr = (&xtr - &mean) / &std;
    let xte = (&xte - &mean) / &std;

    let d = xtr.ncols();
    let mut w = Array2::<f64>::zeros((d, n_classes));
    let mut b = Array1::<f64>::zeros(n_classes);
    let inv = 1.0 / ytr.len() as f64;
    let mut prev = f64::INFINITY;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        let mut g = xtr.dot(&w) + &b;
        let mut loss = 0.0;
        for (mut row, &y) in g.rows_mut().into_iter().zip(&ytr) {
            let lse = model::log_sum_exp(row.view());
            loss += lse - row[y];
            row.mapv_inplace(|v| (v - lse).exp());
            row[y] -= 1.0;
        }
        loss = loss * inv + 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>();
        let gw = xtr.t().dot(&g) * inv + &w * cfg.l2;
        let gb = g.sum_axis(Axis(0)) * inv;
        w.scaled_add(-cfg.lr, &gw);
        b.scaled_add(-cfg.lr, &gb);
        if (prev - loss).abs() < cfg.tol {
            break;
        }
        prev = loss;
    }
    Ok(ProbeResult {
        train_accuracy: accuracy(&w, &b, &xtr, &ytr),
        test_accuracy: accuracy(&w, &b, &xte, &yte),
        epochs_run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAccuracy {
    /// Percent of the training run.
    pub stage: u32,
    pub result: ProbeResult,
}

/// Probes each training-stage snapshot. A missing snapshot is an error
/// naming the stage.
pub fn probe_stages(
    stages: &[(u32, Option<&ModelState>)],
    inputs: &[MixedSequence],
    labels: &[usize],
    kind: ProbeKind,
    cfg: &ProbeConfig,
    split_seed: u64,
) -> Result<Vec<StageAccuracy>> {
    stages
        .iter()
        .map(|&(stage, state)| {
            let state = state.ok_or_else(|| Error::MissingStage(format!("{stage}%")))?;
            let task = ProbeTask {
                features: probe_features(state, inputs)?,
                labels: labels.to_vec(),
                kind,
            };
            Ok(StageAccuracy {
                stage,
                result: linear_probe(&task, cfg, split_seed)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfigs {
    pub plus_aux: TrainConfig,
    pub minus_aux: TrainConfig,
}

impl AblationConfigs {
    /// The two configs may differ only in the coarse and next-code weights,
    /// and the minus side must have both at zero.
    pub fn check(&self) -> Result<()> {
        let mut aligned = self.minus_aux.clone();
        aligned.weights.coarse = self.plus_aux.weights.coarse;
        aligned.weights.next = self.plus_aux.weights.next;
        ensure!(
            aligned == self.plus_aux,
            Error::Config("ablation configs differ beyond the auxiliary weights".into())
        );
        ensure!(
            self.minus_aux.weights.coarse == 0.0 && self.minus_aux.weights.next == 0.0,
            Error::Config("minus_aux must zero both auxiliary weights".into())
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub factor: Factor,
    pub plus_aux: f64,
    pub minus_aux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: Factor,
    pub plus_aux_mean: f64,
    pub minus_aux_mean: f64,
    /// Mean of per-seed `plus − minus`.
    pub paired_diff_mean: f64,
    pub plus_aux_std: f64,
    pub minus_aux_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub per_seed: Vec<SeedAccuracy>,
    pub summary: Vec<FactorSummary>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Trains both configs from `init(seed)` with the same data order per seed
/// and scores every factor's pairs.
pub fn run_ablation(
    configs: &AblationConfigs,
    init: &dyn Fn(u64) -> Result<ModelState>,
    data: TrainData<'_>,
    steps: u64,
    pairs: &[(Factor, Vec<PreferencePair>)],
    seeds: &[u64],
    bootstrap_seed: u64,
) -> Result<AblationReport> {
    configs.check()?;
    ensure!(!seeds.is_empty(), Error::InvalidArgument("no seeds".into()));
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let base = init(seed)?;
        let mut acc = Vec::new();
        for cfg in [&configs.plus_aux, &configs.minus_aux] {
            let mut state = base.clone();
            Trainer::new(data, cfg).run(&mut state, steps, |_, _| Ok(()))?;
            let mut by_factor = Vec::new();
            for (factor, ps) in pairs {
                by_factor.push((*factor, preference_accuracy(&state, ps, bootstrap_seed)?.accuracy));
            }
            acc.push(by_factor);
        }
        for ((factor, plus), (_, minus)) in acc[0].iter().zip(&acc[1]) {
            per_seed.push(SeedAccuracy {
                seed,
                factor: *factor,
                plus_aux: *plus,
                minus_aux: *minus,
            });
        }
    }
    let summary = pairs
        .iter()
        .map(|(factor, _)| {
            let rows: Vec<&SeedAccuracy> = per_seed.iter().filter(|r| r.factor == *factor).collect();
            let plus: Vec<f64> = rows.iter().map(|r| r.plus_aux).collect();
            let minus: Vec<f64> = rows.iter().map(|r| r.minus_aux).collect();
            let diff: Vec<f64> = rows.iter().map(|r| r.plus_aux - r.minus_aux).collect();
            let (pm, ps) = mean_std(&plus);
            let (mm, ms) = mean_std(&minus);
            FactorSummary {
                factor: *factor,
                plus_aux_mean: pm,
                minus_aux_mean: mm,
                paired_diff_mean: mean_std(&diff).0,
                plus_aux_std: ps,
                minus_aux_std: ms,
            }
        })
        .collect();
    Ok(AblationReport { per_seed, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interleave::Modality;

    fn seq(n: usize) -> MixedSequence {
        let mut s = MixedSequence::empty();
        for t in 0..n {
            s.push(t as u32, Modality::Audio, Some(t as u32), Some(t as u32), t as f64);
        }
        s
    }

    fn pairs(n: usize) -> Vec<PreferencePair> {
        let base = Latents {
            speaker: 0,
            content: 0,
            background: 0,
            switch: None,
        };
        (0..n)
            .map(|i| PreferencePair {
                natural: seq(3 + i % 4),
                perturbed: seq(3 + i % 5),
                factor: Factor::Speaker,
                natural_latents: base,
                perturbed_latents: Latents {
                    switch: Some(crate::synthgen::Switch {
                        factor: Factor::Speaker,
                        frame: 1,
                        to: 1,
                    }),
                    ..base
                },
            })
            .collect()
    }

    #[test]
    fn constant_and_oracle_scorers() {
        let ps = pairs(20);
        let c = preference_accuracy(&|_: &MixedSequence, _: &Latents| Ok(1.0), &ps, 0).unwrap();
        assert_eq!(c.accuracy, 0.5);
        assert_eq!(c.ci, (0.5, 0.5));
        let o = preference_accuracy(&oracle_scorer, &ps, 0).unwrap();
        assert_eq!(o.accuracy, 1.0);
    }

    #[test]
    fn unscorable_pairs_are_counted() {
        let ps = pairs(10);
        let s = |q: &MixedSequence, l: &Latents| {
            if q.len() == 3 {
                Err(Error::InvalidArgument("nope".into()))
            } else {
                oracle_scorer(q, l)
            }
        };
        let r = preference_accuracy(&s, &ps, 0).unwrap();
        assert!(r.n_excluded > 0);
        assert_eq!(r.n_excluded + r.n_scored, 10);
    }

    #[test]
    fn one_hot_features_probe_perfectly() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut x = Array2::zeros((60, 3));
        for (i, &l) in labels.iter().enumerate() {
            x[[i, l]] = 1.0;
        }
        let task = ProbeTask {
            features: x,
            labels,
            kind: ProbeKind::Content,
        };
        let r = linear_probe(&task, &ProbeConfig::default(), 4).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn single_class_probe_is_rejected() {
        let task = ProbeTask {
            features: Array2::zeros((10, 2)),
            labels: vec![0; 10],
            kind: ProbeKind::Content,
        };
        assert!(linear_probe(&task, &ProbeConfig::default(), 0).is_err());
    }

    #[test]
    fn missing_stage_is_named() {
        let err = probe_stages(&[(40, None)], &[], &[], ProbeKind::Content, &ProbeConfig::default(), 0)
            .unwrap_err();
        assert!(err.to_string().contains("40%"), "{err}");
    }

    #[test]
    fn ablation_drift_is_rejected() {
        let plus = TrainConfig::default();
        let mut minus = plus.clone();
        minus.weights.coarse = 0.0;
        minus.weights.next = 0.0;
        let ok = AblationConfigs {
            plus_aux: plus.clone(),
            minus_aux: minus.clone(),
        };
        ok.check().unwrap();
        minus.batch_size += 1;
        let bad = AblationConfigs {
            plus_aux: plus,
            minus_aux: minus,
        };
        assert!(bad.check().is_err());
    }
}
