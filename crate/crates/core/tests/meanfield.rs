mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sparsegpc::kernels::{Family, KernelSpec};
use sparsegpc::likelihood::label_sign;
use sparsegpc::linalg::cholesky_with_jitter;
use sparsegpc::meanfield::*;
use sparsegpc_oracles as oracles;

const H: f64 = 1e-5;

struct Problem {
    spec: KernelSpec,
    x: DMatrix<f64>,
    y: Vec<f64>,
    state: MeanFieldState,
}

fn problem(seed: u64, n: usize, m: usize, dim: usize, families: &[Family]) -> Problem {
    let mut rng = rng(seed);
    let spec = random_kernel(&mut rng, dim, families);
    let x = random_inputs(&mut rng, n, dim);
    let y = random_labels(&mut rng, n);
    let z = DMatrix::from_fn(m, dim, |_, _| rng.random_range(-1.5..1.5));
    let a = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    Problem {
        spec,
        x,
        y,
        state: MeanFieldState::new(z, a).unwrap(),
    }
}

/// The bound from explicit N×N inverses with `E[g gᵀ]` materialized.
fn dense_bound(p: &Problem) -> f64 {
    let n = p.x.nrows();
    let knm = p.spec.gram(&p.x, &p.state.z).unwrap();
    let kmm = cholesky_with_jitter(&p.spec.gram_sym(&p.state.z).unwrap(), 1e-6).unwrap().reconstruct();
    let q = &knm * kmm.try_inverse().unwrap() * knm.transpose();
    let knn = p.spec.gram_sym(&p.x).unwrap();
    let qi = &q + DMatrix::identity(n, n);
    let pm = qi.clone().try_inverse().unwrap();
    let mut mean = DVector::zeros(n);
    let mut second = DVector::zeros(n);
    let mut log_gamma = 0.0;
    for i in 0..n {
        let t = truncated_moments(p.y[i], p.state.a[i], 1.0 / pm[(i, i)]);
        mean[i] = t.mean;
        second[i] = t.second_moment;
        log_gamma += t.log_norm;
    }
    let mut egg = &mean * mean.transpose();
    for i in 0..n {
        egg[(i, i)] = second[i];
    }
    let mut site = 0.0;
    for i in 0..n {
        let a = p.state.a[i];
        let e_sq = second[i] - 2.0 * a * mean[i] + a * a;
        site += (1.0 / pm[(i, i)]).ln() + e_sq * pm[(i, i)];
    }
    log_gamma - 0.5 * qi.determinant().ln() - 0.5 * (&pm * egg).trace() + 0.5 * site
        - 0.5 * (knn - q).trace()
}

#[test]
fn site_precisions_match_dense_inverse() {
    for seed in 0..5 {
        let p = problem(seed, 12, 4, 2, &[Family::Rbf, Family::Linear]);
        let got = site_precisions(&p.spec, &p.state.z, &p.x).unwrap();
        let kmm = cholesky_with_jitter(&p.spec.gram_sym(&p.state.z).unwrap(), 1e-6).unwrap().reconstruct();
        let want = oracles::dense_site_precisions(&p.spec.gram(&p.x, &p.state.z).unwrap(), &kmm);
        for i in 0..12 {
            assert!((got[i] - want[i]).abs() <= 1e-10, "{} vs {}", got[i], want[i]);
            assert!(got[i] > 0.0 && got[i] <= 1.0);
        }
    }
}

#[test]
fn bound_matches_dense_evaluation() {
    for seed in 0..6 {
        let p = problem(seed + 10, 9, 3, 2, &[Family::Rbf, Family::Matern32]);
        let got = mf_bound(&p.spec, &p.state, &p.x, &p.y).unwrap().value;
        let want = dense_bound(&p);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn truncated_moments_match_simulation() {
    for (i, &(y, a, var)) in [(1.0, -5.0, 1.0), (1.0, 0.3, 2.0), (0.0, 1.5, 0.5), (0.0, -0.2, 3.0)]
        .iter()
        .enumerate()
    {
        let got = truncated_moments(y, a, var);
        let mc = oracles::mc_truncated_moments(label_sign(y), a, var, 1_000_000, i as u64);
        assert!((got.mean - mc.mean).abs() <= 3.0 * mc.mean_se, "mean {} vs {}", got.mean, mc.mean);
        assert!(
            (got.second_moment - mc.second).abs() <= 3.0 * mc.second_se,
            "second {} vs {}",
            got.second_moment,
            mc.second
        );
        let exact_norm = oracles::phi(label_sign(y) * a / var.sqrt()).ln();
        assert!((got.log_norm - exact_norm).abs() < 1e-12);
    }
}

#[test]
fn grad_a_matches_finite_differences() {
    for seed in 0..10 {
        let p = problem(seed + 100, 10, 3, 1, &[Family::Rbf]);
        let report = mf_bound(&p.spec, &p.state, &p.x, &p.y).unwrap();
        let mut f = |v: &[f64]| {
            let mut s = p.state.clone();
            s.a = DVector::from_column_slice(v);
            mf_bound(&p.spec, &s, &p.x, &p.y).unwrap().value
        };
        let a0: Vec<f64> = p.state.a.iter().copied().collect();
        for i in 0..10 {
            let fd = oracles::central_diff(&mut f, &a0, i, H);
            assert_grad(&format!("seed {seed} a[{i}]"), report.grad_a[i], fd, 1e-4);
        }
    }
}

#[test]
fn inducing_and_kernel_gradients_match_finite_differences() {
    let families: [&[Family]; 3] = [&[Family::Rbf], &[Family::Matern32], &[Family::Rbf, Family::Linear]];
    for seed in 0..9 {
        let p = problem(seed + 200, 10, 3, 2, families[seed as usize % 3]);
        let report = mf_bound(&p.spec, &p.state, &p.x, &p.y).unwrap();
        let z0: Vec<f64> = p.state.z.iter().copied().collect();
        let mut fz = |v: &[f64]| {
            let mut s = p.state.clone();
            s.z = DMatrix::from_column_slice(3, 2, v);
            mf_bound(&p.spec, &s, &p.x, &p.y).unwrap().value
        };
        for i in 0..z0.len() {
            let fd = oracles::central_diff(&mut fz, &z0, i, H);
            assert_grad(&format!("seed {seed} z[{i}]"), report.grad_z.as_slice()[i], fd, 1e-4);
        }
        let theta = p.spec.to_flat();
        let mut fk = |v: &[f64]| {
            let spec = p.spec.with_flat(v).unwrap();
            mf_bound(&spec, &p.state, &p.x, &p.y).unwrap().value
        };
        for i in 0..theta.len() {
            let fd = oracles::central_diff(&mut fk, &theta, i, H);
            assert_grad(&format!("seed {seed} theta[{i}]"), report.grad_kernel[i], fd, 1e-4);
        }
    }
}

#[test]
fn distant_inducing_points_reduce_to_independent_sites() {
    let spec = KernelSpec::rbf(1);
    let x = DMatrix::from_column_slice(4, 1, &[-1.0, 0.0, 0.4, 2.0]);
    let y = [1.0, 0.0, 0.0, 1.0];
    let a = DVector::from_column_slice(&[0.7, 0.3, -2.0, -1.1]);
    let state = MeanFieldState::new(DMatrix::from_element(2, 1, 1e3), a.clone()).unwrap();
    let got = mf_bound(&spec, &state, &x, &y).unwrap().value;

    // with Q = 0 each site has unit precision and the bound separates
    let mut want = 0.0;
    for i in 0..4 {
        let s = label_sign(y[i]);
        let side = |g: f64| if s * g > 0.0 { 1.0 } else { 0.0 };
        let gamma = oracles::gaussian_expectation(&side, a[i], 1.0, 0.0);
        let second = oracles::gaussian_expectation(&|g| side(g) * g * g, a[i], 1.0, 0.0) / gamma;
        let dev = oracles::gaussian_expectation(&|g| side(g) * (a[i] - g).powi(2), a[i], 1.0, 0.0) / gamma;
        want += gamma.ln() - 0.5 * second + 0.5 * dev - 0.5;
    }
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn inner_loop_is_monotone_and_reaches_stationarity() {
    for seed in 0..5 {
        let p = problem(seed + 300, 10, 3, 1, &[Family::Rbf]);
        let before = mf_bound(&p.spec, &p.state, &p.x, &p.y).unwrap().value;
        let (out, info) = mf_inner_loop(&p.state, &p.spec, &p.x, &p.y, 100_000, 1e-14).unwrap();
        assert!(info.converged);
        assert_eq!(info.bounds[0], before);
        for w in info.bounds.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let report = mf_bound(&p.spec, &out, &p.x, &p.y).unwrap();
        assert!(report.value >= before);
        assert!(report.grad_a.amax() <= 1e-5, "seed {seed}: {}", report.grad_a.amax());
        assert_eq!(out.precisions.len(), 10);

        let (again, info) = mf_inner_loop(&out, &p.spec, &p.x, &p.y, 100, 1e-10).unwrap();
        assert_eq!(info.iterations, 0);
        assert!((&again.a - &out.a).amax() < 1e-6);
    }
}

#[test]
fn bound_is_invariant_to_permutations() {
    let p = problem(400, 8, 3, 2, &[Family::Rbf]);
    let base = mf_bound(&p.spec, &p.state, &p.x, &p.y).unwrap().value;
    let order = [5, 2, 7, 0, 3, 1, 6, 4];
    let x = DMatrix::from_fn(8, 2, |i, j| p.x[(order[i], j)]);
    let y: Vec<f64> = order.iter().map(|&i| p.y[i]).collect();
    let a = DVector::from_fn(8, |i, _| p.state.a[order[i]]);
    let z = DMatrix::from_fn(3, 2, |i, j| p.state.z[([2, 0, 1][i], j)]);
    let state = MeanFieldState::new(z, a).unwrap();
    let permuted = mf_bound(&p.spec, &state, &x, &y).unwrap().value;
    assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0), "{base} vs {permuted}");
}

#[test]
fn bound_below_brute_force_marginal() {
    for seed in 0..3 {
        let p = problem(seed + 500, 6, 3, 1, &[Family::Rbf]);
        let (fit, _) = mf_inner_loop(&p.state, &p.spec, &p.x, &p.y, 1000, 1e-10).unwrap();
        let value = mf_bound(&p.spec, &fit, &p.x, &p.y).unwrap().value;
        let est = oracles::mc_log_marginal_probit(&p.spec.gram(&p.x, &p.x).unwrap(), &p.y, 1_000_000, seed);
        assert!(value <= est.log_mean + 3.0 * est.se_log, "{value} vs {}", est.log_mean);
    }
}

#[test]
fn gaussian_approx_matches_dense_formula() {
    let mut rng = rng(600);
    let spec = random_kernel(&mut rng, 1, &[Family::Rbf]);
    let x = random_inputs(&mut rng, 5, 1);
    let y = random_labels(&mut rng, 5);
    let a = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
    let state = MeanFieldState::new(x.clone(), a).unwrap();
    let xs = random_inputs(&mut rng, 4, 1);
    let got = mf_predict(&spec, &state, &x, &y, &xs, MfPredictMode::GaussianApprox).unwrap();

    let kmm = cholesky_with_jitter(&spec.gram_sym(&x).unwrap(), 1e-6).unwrap().reconstruct();
    let knm = spec.gram(&x, &x).unwrap();
    let kmm_inv = kmm.clone().try_inverse().unwrap();
    let q = &knm * &kmm_inv * knm.transpose();
    let pm = (q + DMatrix::identity(5, 5)).try_inverse().unwrap();
    let eta = DVector::from_fn(5, |i, _| truncated_moments(y[i], state.a[i], 1.0 / pm[(i, i)]).mean);
    let sigma = &kmm - knm.transpose() * &pm * &knm;
    let mu = &sigma * &kmm_inv * knm.transpose() * eta;
    let ks = spec.gram(&xs, &x).unwrap();
    let kss = spec.gram_diag(&xs).unwrap();
    for j in 0..4 {
        let aj = &kmm_inv * ks.row(j).transpose();
        let mean = aj.dot(&mu);
        let var = kss[j] - (aj.transpose() * (&kmm - &sigma) * &aj)[(0, 0)];
        assert!((got.marginals.means[j] - mean).abs() < 1e-8);
        assert!((got.marginals.variances[j] - var).abs() < 1e-8);
        let prob = oracles::phi(mean / (1.0 + var).sqrt());
        assert!((got.marginals.probs[j] - prob).abs() < 1e-8);
    }
}

#[test]
fn flipped_problem_predicts_complements() {
    let p = problem(700, 10, 3, 1, &[Family::Rbf]);
    let xs = random_inputs(&mut rng(701), 5, 1);
    let flipped_y: Vec<f64> = p.y.iter().map(|v| 1.0 - v).collect();
    let flipped = MeanFieldState::new(p.state.z.clone(), -&p.state.a).unwrap();
    for mode in [MfPredictMode::GaussianApprox, MfPredictMode::MonteCarlo { samples: 20_000, seed: 9 }] {
        let one = mf_predict(&p.spec, &p.state, &p.x, &p.y, &xs, mode).unwrap();
        let two = mf_predict(&p.spec, &flipped, &p.x, &flipped_y, &xs, mode).unwrap();
        for j in 0..5 {
            assert!((one.marginals.probs[j] + two.marginals.probs[j] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn monte_carlo_predictions_agree_across_sample_sizes() {
    let p = problem(800, 10, 3, 1, &[Family::Rbf]);
    let (fit, _) = mf_inner_loop(&p.state, &p.spec, &p.x, &p.y, 1000, 1e-10).unwrap();
    let xs = random_inputs(&mut rng(801), 6, 1);
    let small = mf_predict(&p.spec, &fit, &p.x, &p.y, &xs, MfPredictMode::MonteCarlo { samples: 100_000, seed: 1 })
        .unwrap();
    let large =
        mf_predict(&p.spec, &fit, &p.x, &p.y, &xs, MfPredictMode::MonteCarlo { samples: 1_000_000, seed: 2 })
            .unwrap();
    let (se_s, se_l) = (small.prob_std_err.unwrap(), large.prob_std_err.unwrap());
    for j in 0..6 {
        let combined = (se_s[j].powi(2) + se_l[j].powi(2)).sqrt();
        let diff = (small.marginals.probs[j] - large.marginals.probs[j]).abs();
        assert!(diff <= 3.0 * combined, "point {j}: {diff} vs {combined}");
    }
}

#[test]
fn monte_carlo_is_deterministic_per_seed() {
    let p = problem(900, 8, 2, 1, &[Family::Rbf]);
    let xs = random_inputs(&mut rng(901), 3, 1);
    let mode = MfPredictMode::MonteCarlo { samples: 500, seed: 4 };
    let one = mf_predict(&p.spec, &p.state, &p.x, &p.y, &xs, mode).unwrap();
    let two = mf_predict(&p.spec, &p.state, &p.x, &p.y, &xs, mode).unwrap();
    assert_eq!(one.marginals, two.marginals);
}
