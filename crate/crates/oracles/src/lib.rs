//! Reference computations for tests. Nothing here calls into the library
//! under test: matrices are inverted explicitly with nalgebra, integrals are
//! done adaptively, and marginal likelihoods by plain Monte Carlo.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use statrs::function::erf::erfc;

pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`; below −30 from the asymptotic series
/// `−x²/2 − log(−x) − ½ log 2π + log(1 − x⁻² + 3x⁻⁴ − 15x⁻⁶ + 105x⁻⁸)`.
pub fn log_phi(x: f64) -> f64 {
    if x > -30.0 {
        return phi(x).ln();
    }
    let r = 1.0 / (x * x);
    let series = 1.0 - r + 3.0 * r * r - 15.0 * r.powi(3) + 105.0 * r.powi(4);
    -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
}

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Adaptive Simpson integration of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// `E_{N(mean, var)}[g]` by adaptive integration in standardized
/// coordinates over ±15 standard deviations, split at `breakpoint` (in the
/// original coordinates) when it falls inside.
pub fn gaussian_expectation(g: &dyn Fn(f64) -> f64, mean: f64, var: f64, breakpoint: f64) -> f64 {
    let sd = var.sqrt();
    let h = |x: f64| g(mean + sd * x) * pdf(x);
    let x0 = ((breakpoint - mean) / sd).clamp(-15.0, 15.0);
    integrate(&h, -15.0, x0, 1e-15) + integrate(&h, x0, 15.0, 1e-15)
}

/// Central finite difference of a scalar function along one coordinate.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

/// Monte-Carlo estimate of a log-probability and its standard error on the log scale.
#[derive(Debug, Clone, Copy)]
pub struct LogEstimate {
    pub log_mean: f64,
    pub se_log: f64,
}

/// `log p(y) = log E_{f∼N(0,K)}[∏ Φ(sₙ fₙ)]` for probit classification.
pub fn mc_log_marginal_probit(k: &DMatrix<f64>, y: &[f64], samples: usize, seed: u64) -> LogEstimate {
    let n = k.nrows();
    let chol = nalgebra::Cholesky::new(k.clone() + DMatrix::identity(n, n) * 1e-12)
        .expect("prior covariance must be positive definite")
        .unpack();
    let signs: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 1.0 } else { -1.0 }).collect();
    const CHUNK: usize = 100_000;
    let chunks = samples.div_ceil(CHUNK);
    let partial: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut eps = vec![0.0; n];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..count {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                let mut prod = 1.0;
                for i in 0..n {
                    let mut f = 0.0;
                    for j in 0..=i {
                        f += chol[(i, j)] * eps[j];
                    }
                    prod *= phi(signs[i] * f);
                }
                s1 += prod;
                s2 += prod * prod;
            }
            (s1, s2, count)
        })
        .collect();
    let (s1, s2, cnt) = partial
        .iter()
        .fold((0.0, 0.0, 0usize), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    let nf = cnt as f64;
    let mean = s1 / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    LogEstimate {
        log_mean: mean.ln(),
        se_log: (var / nf).sqrt() / mean,
    }
}

/// Exact `log N(y | 0, C)` via explicit inverse and determinant.
pub fn dense_log_gauss(y: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let inv = c.clone().try_inverse().expect("covariance must be invertible");
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + c.determinant().ln() + (y.transpose() * inv * y)[(0, 0)])
}

/// `(means, variances)` of `q(f) = N(A m, Knn + A(S − Kmm)Aᵀ)` with `A = Knm Kmm⁻¹`.
pub fn dense_qf(
    knn: &DMatrix<f64>,
    knm: &DMatrix<f64>,
    kmm: &DMatrix<f64>,
    m: &DVector<f64>,
    s: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let a = knm * kmm.clone().try_inverse().unwrap();
    let cov = knn + &a * (s - kmm) * a.transpose();
    (&a * m, cov.diagonal())
}

/// `KL[N(m, S) ‖ N(0, K)]` from explicit inverse and determinants.
pub fn dense_kl(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let k_inv = k.clone().try_inverse().unwrap();
    0.5 * ((&k_inv * s).trace() + (m.transpose() * &k_inv * m)[(0, 0)] - m.len() as f64
        + k.determinant().ln()
        - s.determinant().ln())
}

/// Diagonal of `[Q + I]⁻¹` with `Q = Knm Kmm⁻¹ Kmn`, via explicit inverse.
pub fn dense_site_precisions(knm: &DMatrix<f64>, kmm: &DMatrix<f64>) -> DVector<f64> {
    let n = knm.nrows();
    let q = knm * kmm.clone().try_inverse().unwrap() * knm.transpose();
    (q + DMatrix::identity(n, n)).try_inverse().unwrap().diagonal()
}

/// Moments of `N(a, var)` truncated to the side of `sign`, by importance
/// sampling in standardized coordinates.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedMc {
    pub log_norm: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub second: f64,
    pub second_se: f64,
}

pub fn mc_truncated_moments(sign: f64, a: f64, var: f64, samples: usize, seed: u64) -> TruncatedMc {
    let t = var.sqrt();
    // standardized w ~ N(0,1) truncated to w > c; g = a + sign·t·w
    let c = -sign * a / t;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(samples);
    let mut weights = Vec::with_capacity(samples);
    if c <= 0.0 {
        // plain rejection: every accepted draw has unit weight
        let mut tried = 0usize;
        while draws.len() < samples {
            let w: f64 = StandardNormal.sample(&mut rng);
            tried += 1;
            if w > c {
                draws.push(w);
                weights.push(1.0);
            }
        }
        let p = draws.len() as f64 / tried as f64;
        return summarize(&draws, &weights, p.ln(), a, sign, t);
    }
    let rate = 0.5 * (c + (c * c + 4.0).sqrt());
    let exp = Exp::new(rate).unwrap();
    for _ in 0..samples {
        let e: f64 = exp.sample(&mut rng);
        let w = c + e;
        draws.push(w);
        weights.push(pdf(w) / (rate * (-rate * e).exp()));
    }
    let z = weights.iter().sum::<f64>() / samples as f64;
    summarize(&draws, &weights, z.ln(), a, sign, t)
}

fn summarize(draws: &[f64], weights: &[f64], log_norm: f64, a: f64, sign: f64, t: f64) -> TruncatedMc {
    let total: f64 = weights.iter().sum();
    let g: Vec<f64> = draws.iter().map(|w| a + sign * t * w).collect();
    let est = |h: &dyn Fn(f64) -> f64| -> (f64, f64) {
        let mean = g.iter().zip(weights).map(|(x, w)| w * h(*x)).sum::<f64>() / total;
        let var = g
            .iter()
            .zip(weights)
            .map(|(x, w)| (w * (h(*x) - mean)).powi(2))
            .sum::<f64>()
            / (total * total);
        (mean, var.sqrt())
    };
    let (mean, mean_se) = est(&|x| x);
    let (second, second_se) = est(&|x| x * x);
    TruncatedMc {
        log_norm,
        mean,
        mean_se,
        second,
        second_se,
    }
}

/// Within-cluster sum of squares of `x` against the nearest centroid.
pub fn wcss(x: &DMatrix<f64>, centroids: &DMatrix<f64>) -> f64 {
    (0..x.nrows())
        .map(|i| {
            (0..centroids.nrows())
                .map(|c| (x.row(i) - centroids.row(c)).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Best WCSS over `trials` random `k`-subsets of the rows used directly as centroids.
pub fn best_random_subset_wcss(x: &DMatrix<f64>, k: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    (0..trials)
        .map(|_| {
            let idx = rand::seq::index::sample(&mut rng, n, k);
            let c = DMatrix::from_fn(k, x.ncols(), |i, j| x[(idx.index(i), j)]);
            wcss(x, &c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Uniform random matrix in `[lo, hi)`.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Leave-one-out accuracy of an RBF Parzen-window classifier with the given lengthscale.
pub fn parzen_loo_accuracy(x: &DMatrix<f64>, y: &[f64], lengthscale: f64) -> f64 {
    let n = x.nrows();
    let mut correct = 0;
    for i in 0..n {
        let mut score = 0.0;
        for (j, &yj) in y.iter().enumerate().take(n) {
            if i == j {
                continue;
            }
            let d2 = (x.row(i) - x.row(j)).norm_squared();
            let w = (-0.5 * d2 / (lengthscale * lengthscale)).exp();
            score += if yj > 0.5 { w } else { -w };
        }
        if (score >= 0.0) == (y[i] > 0.5) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
