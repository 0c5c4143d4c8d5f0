//! Lloyd's k-means with k-means++ seeding.
//!
//! Used twice: to fit the frozen codebook stub from calibration features and
//! to cluster per-code centroids into coarse buckets.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Array2<f64>,
    pub assignment: Vec<usize>,
    /// Objective (sum of squared distances) after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row of `centers` nearest to `x` (lowest index wins ties).
pub fn nearest(centers: ArrayView2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(points: ArrayView2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = points.nrows();
    let mut rng = rng::seeded(seed);
    let mut centers = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centers
}

pub fn fit(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let n = points.nrows();
    ensure!(k >= 1, Error::InvalidArgument("k must be at least 1".into()));
    ensure!(
        k <= n,
        Error::InvalidArgument(format!("k={k} exceeds the {n} available points"))
    );
    let mut centers = plus_plus_init(points, k, seed);
    let mut assignment = vec![0usize; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        let mut j = 0.0;
        let mut dist = vec![0.0; n];
        for (i, p) in points.rows().into_iter().enumerate() {
            let (a, d) = nearest(centers.view(), p);
            assignment[i] = a;
            dist[i] = d;
            j += d;
        }
        objective.push(j);
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(assignment[i]);
            row += &p;
            counts[assignment[i]] += 1;
        }
        let mut movement: f64 = 0.0;
        let mut taken = vec![false; n];
        for c in 0..k {
            let new_center = if counts[c] > 0 {
                sums.row(c).mapv(|v| v / counts[c] as f64)
            } else {
                // Empty cluster: move it onto the point currently farthest
                // from its center.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a point available");
                taken[far] = true;
                dist[far] = 0.0;
                points.row(far).to_owned()
            };
            movement = movement.max(sq_dist(centers.row(c), new_center.view()).sqrt());
            centers.row_mut(c).assign(&new_center);
        }
        if movement < tol {
            // Refresh the assignment against the final centers.
            let mut j = 0.0;
            for (i, p) in points.rows().into_iter().enumerate() {
                let (a, d) = nearest(centers.view(), p);
                assignment[i] = a;
                j += d;
            }
            objective.push(j);
            break;
        }
    }
    Ok(KMeansFit {
        centers,
        assignment,
        objective,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_cluster_is_mean() {
        let pts = array![[0.0, 0.0], [2.0, 0.0], [4.0, 3.0]];
        let fit = fit(pts.view(), 1, 3, 50, 1e-12).unwrap();
        assert!((fit.centers[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((fit.centers[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_gives_zero_objective() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [7.0, 7.0]];
        let fit = fit(pts.view(), 4, 11, 50, 1e-12).unwrap();
        assert_eq!(*fit.objective.last().unwrap(), 0.0);
        let mut a = fit.assignment.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn objective_non_increasing() {
        let mut r = rng::seeded(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pts = Array2::from_shape_fn((300, 3), |_| normal.sample(&mut r));
        for seed in 0..5 {
            let fit = fit(pts.view(), 12, seed, 100, 1e-10).unwrap();
            for w in fit.objective.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective);
            }
        }
    }

    #[test]
    fn rejects_too_many_clusters() {
        let pts = array![[0.0], [1.0]];
        assert!(fit(pts.view(), 3, 0, 10, 1e-9).is_err());
        assert!(fit(pts.view(), 0, 0, 10, 1e-9).is_err());
    }
}
