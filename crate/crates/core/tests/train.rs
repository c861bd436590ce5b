use nalgebra::DMatrix;
use sparsegpc::data::{standardize, synth_banana, synth_two_clusters, Dataset};
use sparsegpc::init::{kmeans_inducing, KMeansConfig};
use sparsegpc::kernels::{Family, KernelSpec, KernelTerm};
use sparsegpc::likelihood::GaussHermiteRule;
use sparsegpc::meanfield::{mf_bound, mf_predict, MfPredictMode};
use sparsegpc::optimize::{Block, Clock, OptimizerKind, TrainSchedule};
use sparsegpc::svgp::{elbo_classification, predict, titsias_bound, GaussianNoise, VariationalState};
use sparsegpc::train::*;

fn split(ds: &Dataset, every: usize) -> (Dataset, Dataset) {
    let test: Vec<usize> = (0..ds.len()).filter(|i| i % every == 0).collect();
    let train: Vec<usize> = (0..ds.len()).filter(|i| i % every != 0).collect();
    (ds.subset(&train), ds.subset(&test))
}

fn rbf(dim: usize, ls: f64) -> KernelSpec {
    KernelSpec::single(KernelTerm::isotropic(Family::Rbf, 1.0, ls, dim)).unwrap()
}

#[test]
fn klsp_improves_on_small_banana() {
    let ds = standardize(&synth_banana(25, 0.15, 5).unwrap());
    let spec = rbf(2, 1.0);
    let z = kmeans_inducing(&ds.x, &KMeansConfig::new(8, 1)).unwrap();
    let state = VariationalState::from_prior(&spec, z).unwrap();
    let rule = GaussHermiteRule::default();
    let before = elbo_classification(&spec, &state, &ds.x, &ds.y, ds.len(), &rule).unwrap().elbo;
    let schedule = TrainSchedule {
        phase1_iters: 30,
        phase2_iters: 100,
        ..TrainSchedule::default()
    };
    let out = train_klsp(&spec, &state, &ds.x, &ds.y, &schedule, &mut Clock::logical(), None).unwrap();
    assert!(out.result.value > before + 1.0, "{} vs {before}", out.result.value);
    let after = elbo_classification(&out.spec, &out.state, &ds.x, &ds.y, ds.len(), &rule).unwrap().elbo;
    assert!((after - out.result.value).abs() < 1e-9);
    for w in out.result.trace.windows(2) {
        assert!(w[1].elbo_or_bound >= w[0].elbo_or_bound);
    }
}

#[test]
fn adadelta_separates_two_clusters() {
    let ds = synth_two_clusters(250, 2, 4.0, 7).unwrap();
    let (train, test) = split(&ds, 5);
    let spec = rbf(2, 1.0);
    let z = kmeans_inducing(&train.x, &KMeansConfig::new(16, 2)).unwrap();
    let state = VariationalState::from_prior(&spec, z).unwrap();
    let epochs = 5;
    let steps = epochs * train.len().div_ceil(10);
    let schedule = TrainSchedule {
        phase1_iters: steps,
        phase2_iters: 0,
        optimizer: OptimizerKind::Adadelta,
        step_rate: 0.1,
        batch_size: 10,
        seed: 3,
        trace_every: 50,
    };
    let holdout = Holdout { x: &test.x, y: &test.y };
    let out = train_klsp(&spec, &state, &train.x, &train.y, &schedule, &mut Clock::wall(), Some(holdout)).unwrap();
    let p = predict(&out.spec, &out.state, &test.x).unwrap();
    let (_, err) = classification_metrics(p.probs.as_slice(), &test.y);
    assert!(err <= 0.05, "holdout error {err}");
    let last = out.result.trace.last().unwrap();
    assert_eq!(last.holdout_error, Some(err));
}

#[test]
fn mean_field_training_raises_the_bound() {
    let ds = standardize(&synth_banana(20, 0.15, 6).unwrap());
    let spec = rbf(2, 1.0);
    let z = kmeans_inducing(&ds.x, &KMeansConfig::new(6, 1)).unwrap();
    let schedule = TrainSchedule {
        phase1_iters: 10,
        phase2_iters: 30,
        ..TrainSchedule::default()
    };
    let out = train_mf(&spec, &z, &ds.x, &ds.y, &schedule, InnerLoopConfig::default(), &mut Clock::logical(), None)
        .unwrap();
    let first = out.result.trace.first().unwrap().elbo_or_bound;
    assert!(out.result.value > first);
    for w in out.result.trace.windows(2) {
        assert!(w[1].elbo_or_bound >= w[0].elbo_or_bound - 1e-8);
    }
    let report = mf_bound(&out.spec, &out.state, &ds.x, &ds.y).unwrap();
    assert!(report.grad_a.amax() < 1e-4);
    let p = mf_predict(&out.spec, &out.state, &ds.x, &ds.y, &ds.x, MfPredictMode::GaussianApprox).unwrap();
    let (_, err) = classification_metrics(p.marginals.probs.as_slice(), &ds.y);
    assert!(err <= 0.1, "training error {err}");
}

#[test]
fn optimized_uncollapsed_bound_reaches_collapsed() {
    let n = 25;
    let x = DMatrix::from_fn(n, 1, |i, _| -2.0 + 4.0 * i as f64 / (n - 1) as f64);
    let y: Vec<f64> = (0..n).map(|i| (x[(i, 0)] * 1.7).sin() + 0.1 * ((i * 7 % 5) as f64 - 2.0)).collect();
    let spec = rbf(1, 0.7);
    let noise = GaussianNoise::new(0.05).unwrap();
    let z = DMatrix::from_fn(6, 1, |i, _| x[(i * 4, 0)]);
    let state = VariationalState::from_prior(&spec, z.clone()).unwrap();
    let mut init = pack_svgp(&spec, &state, Some(noise));
    init.set_frozen(Block::Inducing, true);
    init.set_frozen(Block::Kernel, true);
    init.set_frozen(Block::Noise, true);
    let mut obj = GaussianObjective {
        template: spec.clone(),
        x: &x,
        y: &y,
        holdout: None,
        precond: Preconditioner::identity(),
    };
    let schedule = TrainSchedule {
        phase1_iters: 0,
        phase2_iters: 2000,
        ..TrainSchedule::default()
    };
    let res = sparsegpc::optimize::full_batch_optimize(&mut obj, init, &schedule, &mut Clock::logical()).unwrap();
    let collapsed = titsias_bound(&spec, &x, &y, &z, noise).unwrap();
    assert!((res.value - collapsed).abs() <= 1e-6, "{} vs {collapsed}", res.value);
    assert!(res.params.is_frozen(Block::Kernel));
}

#[test]
fn metrics_follow_the_documented_rules() {
    let (nlp, err) = classification_metrics(&[0.5, 0.9, 0.0], &[1.0, 0.0, 0.0]);
    assert!((err - 1.0 / 3.0).abs() < 1e-15);
    let want = -(0.5f64.ln() + 0.1f64.ln() + (1.0 - 1e-9f64).ln()) / 3.0;
    assert!((nlp - want).abs() < 1e-12);
    let (nlp, _) = classification_metrics(&[0.0], &[1.0]);
    assert!((nlp - -(1e-9f64).ln()).abs() < 1e-12);
}
