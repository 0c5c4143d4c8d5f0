//! Semantic-distilled speech-token initialization.
//!
//! Per-code SSL centroids are projected into the model width by a linear map
//! `P`; speech-token embeddings start at `P(mu_k)` plus small Gaussian noise,
//! and a stop-gradient alignment loss keeps hidden states close to
//! `P(SSL_t)` during training. Centroids are also clustered into coarse
//! buckets that serve as auxiliary targets.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::kmeans;
use crate::rng;
use crate::synthgen::FrameStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `n_codes × d_ssl`; rows with `counts[k] == 0` are zero.
    pub mu: Array2<f64>,
    pub counts: Vec<u64>,
}

impl Centroids {
    pub fn n_codes(&self) -> usize {
        self.mu.nrows()
    }

    pub fn populated(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&k| self.counts[k] > 0).collect()
    }

    /// Frame-weighted mean of all features.
    pub fn global_mean(&self) -> Array1<f64> {
        let total: u64 = self.counts.iter().sum();
        let mut m = Array1::zeros(self.mu.ncols());
        for (k, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                m.scaled_add(c as f64 / total as f64, &self.mu.row(k));
            }
        }
        m
    }
}

/// Exact per-code means over every frame of `corpus`.
pub fn fit_centroids(corpus: &[FrameStream], n_codes: usize) -> Result<Centroids> {
    ensure!(
        corpus.iter().any(|s| !s.is_empty()),
        Error::InvalidArgument("cannot fit centroids on an empty corpus".into())
    );
    let dim = corpus
        .iter()
        .find(|s| !s.is_empty())
        .map(|s| s.features.ncols())
        .unwrap();
    let mut sums = Array2::<f64>::zeros((n_codes, dim));
    let mut counts = vec![0u64; n_codes];
    for stream in corpus {
        ensure!(
            stream.features.ncols() == dim,
            Error::ShapeMismatch("feature width differs across streams".into())
        );
        for (t, &code) in stream.codes.iter().enumerate() {
            let k = code as usize;
            ensure!(
                k < n_codes,
                Error::InvalidArgument(format!("code {k} out of range 0..{n_codes}"))
            );
            let mut row = sums.row_mut(k);
            row += &stream.features.row(t);
            counts[k] += 1;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            sums.row_mut(k).mapv_inplace(|v| v / c as f64);
        }
    }
    Ok(Centroids { mu: sums, counts })
}

/// Incremental centroid estimate (running means), mergeable across shards.
#[derive(Debug, Clone)]
pub struct CentroidAccumulator {
    mean: Array2<f64>,
    counts: Vec<u64>,
}

impl CentroidAccumulator {
    pub fn new(n_codes: usize, dim: usize) -> Self {
        CentroidAccumulator {
            mean: Array2::zeros((n_codes, dim)),
            counts: vec![0; n_codes],
        }
    }

    pub fn push(&mut self, code: usize, feature: ArrayView1<f64>) {
        self.counts[code] += 1;
        let n = self.counts[code] as f64;
        let mut row = self.mean.row_mut(code);
        for (m, &x) in row.iter_mut().zip(feature.iter()) {
            *m += (x - *m) / n;
        }
    }

    pub fn push_stream(&mut self, stream: &FrameStream) {
        for (t, &c) in stream.codes.iter().enumerate() {
            self.push(c as usize, stream.features.row(t));
        }
    }

    pub fn merge(&mut self, other: &CentroidAccumulator) {
        for k in 0..self.counts.len() {
            let (na, nb) = (self.counts[k] as f64, other.counts[k] as f64);
            if nb == 0.0 {
                continue;
            }
            let w = nb / (na + nb);
            let mut row = self.mean.row_mut(k);
            row.zip_mut_with(&other.mean.row(k), |a, &b| *a += (b - *a) * w);
            self.counts[k] += other.counts[k];
        }
    }

    pub fn finish(self) -> Centroids {
        Centroids {
            mu: self.mean,
            counts: self.counts,
        }
    }
}

/// Linear map `x -> W x + b` from SSL space into the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `d_model × d_ssl`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub trainable: bool,
}

impl Projection {
    pub fn d_model(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_ssl(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Row-wise projection of an `n × d_ssl` matrix.
    pub fn apply_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Solves `(A + ridge I) X = B` for symmetric positive definite `A`.
fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]] + if i == j { ridge } else { 0.0 };
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                ensure!(
                    sum > 0.0,
                    Error::InvalidArgument("normal equations are not positive definite".into())
                );
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut x = b.clone();
    for col in 0..b.ncols() {
        for i in 0..n {
            let mut v = x[[i, col]];
            for k in 0..i {
                v -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = x[[i, col]];
            for k in i + 1..n {
                v -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = v / l[[i, i]];
        }
    }
    Ok(x)
}

/// Fits `P` by ridge least squares from the populated centroids onto a
/// Gaussian target drawn at `init_std`, then rescales so the projected
/// centroids have RMS `init_std`.
pub fn fit_projection(
    centroids: &Centroids,
    d_model: usize,
    init_std: f64,
    ridge: f64,
    seed: u64,
) -> Result<Projection> {
    let rows = centroids.populated();
    ensure!(
        !rows.is_empty(),
        Error::InvalidArgument("no populated codes to fit the projection".into())
    );
    let d_ssl = centroids.mu.ncols();
    let n = rows.len();
    // Design matrix with a bias column.
    let mut x = Array2::<f64>::ones((n, d_ssl + 1));
    for (i, &k) in rows.iter().enumerate() {
        x.slice_mut(s![i, ..d_ssl]).assign(&centroids.mu.row(k));
    }
    let mut r = rng::seeded(seed);
    let target = Array2::from_shape_fn((n, d_model), |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        init_std * z
    });
    let xtx = x.t().dot(&x);
    let xty = x.t().dot(&target);
    let sol = cholesky_solve(&xtx, &xty, ridge.max(1e-12))?;
    let mut weight = sol.slice(s![..d_ssl, ..]).t().to_owned();
    let mut bias = sol.row(d_ssl).to_owned();
    let fitted = x.dot(&sol);
    let rms = (fitted.iter().map(|v| v * v).sum::<f64>() / fitted.len() as f64).sqrt();
    if rms > 0.0 {
        let scale = init_std / rms;
        weight *= scale;
        bias *= scale;
    }
    Ok(Projection {
        weight,
        bias,
        trainable: true,
    })
}

/// RMS-based default noise scale: `0.01 × RMS(P(mu_k))` over populated codes.
pub fn default_sigma(centroids: &Centroids, proj: &Projection) -> f64 {
    let rows = centroids.populated();
    if rows.is_empty() {
        return 0.0;
    }
    let mut sq = 0.0;
    for &k in &rows {
        let p = proj.apply(centroids.mu.row(k));
        sq += p.dot(&p);
    }
    0.01 * (sq / (rows.len() * proj.d_model()) as f64).sqrt()
}

/// `E_k = P(mu_k) + eps_k`, `eps_k ~ N(0, sigma^2 I)`; unseen codes start at
/// `P(global mean) + eps_k`. With `sigma == 0` no noise is added at all.
pub fn init_embeddings(
    centroids: &Centroids,
    proj: &Projection,
    sigma: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    ensure!(
        centroids.mu.ncols() == proj.d_ssl(),
        Error::ShapeMismatch(format!(
            "centroid width {} vs projection input {}",
            centroids.mu.ncols(),
            proj.d_ssl()
        ))
    );
    ensure!(
        proj.bias.len() == proj.d_model(),
        Error::ShapeMismatch("projection bias length".into())
    );
    ensure!(
        sigma >= 0.0 && sigma.is_finite(),
        Error::InvalidArgument("sigma must be finite and nonnegative".into())
    );
    let fallback = proj.apply(centroids.global_mean().view());
    let mut out = Array2::zeros((centroids.n_codes(), proj.d_model()));
    let mut r = rng::seeded(seed);
    for k in 0..centroids.n_codes() {
        let base = if centroids.counts[k] > 0 {
            proj.apply(centroids.mu.row(k))
        } else {
            fallback.clone()
        };
        let mut row = out.row_mut(k);
        row.assign(&base);
        if sigma > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += sigma * z;
            }
        }
    }
    Ok(out)
}

/// Coarse bucket per code (0-based bucket ids `0..k`).
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMap {
    pub bucket_of: Vec<u32>,
    pub k: usize,
    pub bucket_centers: Array2<f64>,
}

impl CoarseMap {
    pub fn bucket(&self, code: usize) -> usize {
        self.bucket_of[code] as usize
    }
}

#[derive(Debug, Clone)]
pub struct CoarseFit {
    pub map: CoarseMap,
    pub objective: Vec<f64>,
}

pub fn fit_coarse(
    centroids: &Centroids,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<CoarseFit> {
    let rows = centroids.populated();
    ensure!(
        k >= 1 && k <= rows.len(),
        Error::InvalidArgument(format!(
            "K={k} must lie in 1..={} (populated codes)",
            rows.len()
        ))
    );
    let pts = centroids.mu.select(Axis(0), &rows);
    let fit = kmeans::fit(pts.view(), k, seed, max_iters, tol)?;
    let mut assignment = fit.assignment.clone();
    // A max_iters stop can leave a bucket empty; hand it the point farthest
    // from its center.
    for c in 0..k {
        if !assignment.contains(&c) {
            let far = (0..rows.len())
                .filter(|&i| assignment.iter().filter(|&&a| a == assignment[i]).count() > 1)
                .max_by(|&a, &b| {
                    let da = kmeans::sq_dist(pts.row(a), fit.centers.row(assignment[a]));
                    let db = kmeans::sq_dist(pts.row(b), fit.centers.row(assignment[b]));
                    da.total_cmp(&db)
                })
                .expect("k <= populated codes");
            assignment[far] = c;
        }
    }
    let mut bucket_of = vec![0u32; centroids.n_codes()];
    for (i, &code) in rows.iter().enumerate() {
        bucket_of[code] = assignment[i] as u32;
    }
    for code in 0..centroids.n_codes() {
        if centroids.counts[code] == 0 {
            bucket_of[code] = kmeans::nearest(fit.centers.view(), centroids.mu.row(code)).0 as u32;
        }
    }
    Ok(CoarseFit {
        map: CoarseMap {
            bucket_of,
            k,
            bucket_centers: fit.centers,
        },
        objective: fit.objective,
    })
}

/// Value and gradients of the stop-gradient alignment loss.
#[derive(Debug, Clone)]
pub struct AlignmentLoss {
    pub loss: f64,
    /// `T × d_model`, zero at non-audio rows.
    pub grad_hidden: Array2<f64>,
    /// Present only when the projection is trainable.
    pub grad_weight: Option<Array2<f64>>,
    pub grad_bias: Option<Array1<f64>>,
}

/// `(1/T_audio) Σ_{t ∈ audio} ||h_t − P(SSL_t)||²` with `SSL_t` held
/// constant. With no audio positions the loss is 0 with zero gradients.
pub fn alignment_loss(
    hidden: ArrayView2<f64>,
    features: ArrayView2<f64>,
    proj: &Projection,
    audio_mask: &[bool],
) -> Result<AlignmentLoss> {
    let t = hidden.nrows();
    ensure!(
        features.nrows() == t && audio_mask.len() == t,
        Error::ShapeMismatch(format!(
            "hidden {t} rows, features {}, mask {}",
            features.nrows(),
            audio_mask.len()
        ))
    );
    ensure!(
        hidden.ncols() == proj.d_model() && features.ncols() == proj.d_ssl(),
        Error::ShapeMismatch("alignment widths disagree with projection".into())
    );
    let n_audio = audio_mask.iter().filter(|&&m| m).count();
    let mut grad_hidden = Array2::zeros(hidden.raw_dim());
    let mut grad_weight = proj.trainable.then(|| Array2::zeros(proj.weight.raw_dim()));
    let mut grad_bias = proj.trainable.then(|| Array1::zeros(proj.d_model()));
    if n_audio == 0 {
        return Ok(AlignmentLoss {
            loss: 0.0,
            grad_hidden,
            grad_weight,
            grad_bias,
        });
    }
    let inv = 1.0 / n_audio as f64;
    let mut loss = 0.0;
    for i in 0..t {
        if !audio_mask[i] {
            continue;
        }
        let resid = &hidden.row(i) - &proj.apply(features.row(i));
        loss += resid.dot(&resid);
        let g = resid.mapv(|v| 2.0 * v * inv);
        grad_hidden.row_mut(i).assign(&g);
        if let (Some(gw), Some(gb)) = (grad_weight.as_mut(), grad_bias.as_mut()) {
            for r in 0..proj.d_model() {
                for c in 0..proj.d_ssl() {
                    gw[[r, c]] -= g[r] * features[[i, c]];
                }
            }
            *gb -= &g;
        }
    }
    Ok(AlignmentLoss {
        loss: loss * inv,
        grad_hidden,
        grad_weight,
        grad_bias,
    })
}
