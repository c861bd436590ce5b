//! Inducing inputs from k-means on the training inputs.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub num_inducing: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(num_inducing: usize, seed: u64) -> Self {
        Self {
            num_inducing,
            max_iters: 100,
            seed,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: DMatrix<f64>,
    pub wcss: f64,
    /// WCSS after seeding and after each Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Rows sorted lexicographically, so that the result does not depend on input order.
fn canonical_rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let mut rows = crate::kernels::rows(x);
    rows.sort_by(|a, b| lex_cmp(a, b));
    rows
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assign: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = vec![points.iter().map(|p| nearest(p, &centroids).1).sum()];
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            changed |= assign[i] != c;
            assign[i] = c;
            dists[i] = d;
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // an empty cluster takes over the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&i, &j| dists[i].total_cmp(&dists[j]));
                if let Some(i) = far {
                    counts[assign[i]] -= 1;
                    counts[c] = 1;
                    assign[i] = c;
                    dists[i] = 0.0;
                    centroids[c] = points[i].clone();
                }
            }
        }
        let wcss: f64 = points.iter().map(|p| nearest(p, &centroids).1).sum();
        history.push(wcss);
    }
    (centroids, history)
}

/// k-means++ seeded Lloyd iterations, best of `cfg.restarts`.
pub fn kmeans(x: &DMatrix<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::InvalidConfig("k-means on an empty data set".into()));
    }
    if cfg.num_inducing == 0 || cfg.num_inducing > n {
        return Err(Error::InvalidConfig(format!(
            "{} inducing points requested for {n} data points",
            cfg.num_inducing
        )));
    }
    if cfg.restarts == 0 || cfg.max_iters == 0 {
        return Err(Error::InvalidConfig("k-means needs at least one restart and iteration".into()));
    }
    let points = canonical_rows(x);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<Vec<f64>>, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let seeds = plus_plus(&points, cfg.num_inducing, &mut rng);
        let (centroids, history) = lloyd(&points, seeds, cfg.max_iters);
        let wcss = *history.last().unwrap();
        if best.as_ref().is_none_or(|(_, h)| wcss < *h.last().unwrap()) {
            best = Some((centroids, history));
        }
    }
    let (mut centroids, history) = best.unwrap();
    centroids.sort_by(|a, b| lex_cmp(a, b));
    let dim = x.ncols();
    let flat: Vec<f64> = centroids.iter().flatten().copied().collect();
    Ok(KMeansResult {
        centroids: DMatrix::from_row_slice(cfg.num_inducing, dim, &flat),
        wcss: *history.last().unwrap(),
        history,
    })
}

/// Inducing inputs: the k-means centroids.
pub fn kmeans_inducing(x: &DMatrix<f64>, cfg: &KMeansConfig) -> Result<DMatrix<f64>> {
    Ok(kmeans(x, cfg)?.centroids)
}
