#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsegpc::kernels::{Family, KernelSpec, KernelTerm};
use sparsegpc::svgp::VariationalState;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_kernel(rng: &mut ChaCha8Rng, dim: usize, families: &[Family]) -> KernelSpec {
    let terms = families
        .iter()
        .map(|&f| {
            KernelTerm::new(
                f,
                rng.random_range(0.5..2.0),
                (0..dim).map(|_| rng.random_range(0.6..1.8)).collect(),
            )
        })
        .collect();
    KernelSpec::new(terms).unwrap()
}

pub fn random_lower(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            rng.random_range(0.3..1.2)
        } else if i > j {
            rng.random_range(-0.4..0.4)
        } else {
            0.0
        }
    })
}

pub fn random_state(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> VariationalState {
    let z = DMatrix::from_fn(m, dim, |_, _| rng.random_range(-1.5..1.5));
    let mean = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    VariationalState::new(z, mean, random_lower(rng, m)).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0))
}

/// Relative error with a floor, used by every finite-difference check.
pub fn assert_grad(label: &str, got: f64, fd: f64, tol: f64) {
    let err = (got - fd).abs() / fd.abs().max(1e-3);
    assert!(err <= tol, "{label}: analytic {got}, finite difference {fd}, rel err {err:e}");
}
