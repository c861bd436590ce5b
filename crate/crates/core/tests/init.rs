mod common;

use common::rng;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sparsegpc::init::*;
use sparsegpc::Error;
use sparsegpc_oracles as oracles;

fn clouds(seed: u64) -> (DMatrix<f64>, [f64; 2], [f64; 2]) {
    let mut r = rng(seed);
    let mut rows = Vec::new();
    for (cx, cy) in [(-10.0, 0.0), (10.0, 5.0)] {
        for _ in 0..50 {
            let dx: f64 = StandardNormal.sample(&mut r);
            let dy: f64 = StandardNormal.sample(&mut r);
            rows.extend([cx + 0.5 * dx, cy + 0.5 * dy]);
        }
    }
    let x = DMatrix::from_row_slice(100, 2, &rows);
    let mean = |lo: usize| {
        let c = x.rows(lo, 50).row_sum() / 50.0;
        [c[0], c[1]]
    };
    (x.clone(), mean(0), mean(50))
}

#[test]
fn every_point_its_own_cluster() {
    let x = DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 3.0, -1.0, 2.5, 2.5, -4.0, 0.3, 1.1, 1.2]);
    let c = kmeans_inducing(&x, &KMeansConfig::new(5, 1)).unwrap();
    let mut got: Vec<(f64, f64)> = c.row_iter().map(|r| (r[0], r[1])).collect();
    let mut want: Vec<(f64, f64)> = x.row_iter().map(|r| (r[0], r[1])).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
}

#[test]
fn separated_clouds_give_their_means() {
    let (x, left, right) = clouds(2);
    let c = kmeans_inducing(&x, &KMeansConfig::new(2, 7)).unwrap();
    for (row, want) in [(0, left), (1, right)] {
        assert!((c[(row, 0)] - want[0]).abs() < 1e-9);
        assert!((c[(row, 1)] - want[1]).abs() < 1e-9);
    }
}

#[test]
fn beats_best_of_random_subsets() {
    let mut r = rng(3);
    let x = DMatrix::from_fn(200, 2, |_, _| r.random_range(-3.0..3.0));
    let res = kmeans(&x, &KMeansConfig::new(8, 11)).unwrap();
    let oracle = oracles::best_random_subset_wcss(&x, 8, 1000, 5);
    assert!(res.wcss <= oracle, "{} vs {}", res.wcss, oracle);
    assert!((oracles::wcss(&x, &res.centroids) - res.wcss).abs() < 1e-9 * res.wcss);
}

#[test]
fn wcss_never_increases() {
    for seed in 0..10 {
        let mut r = rng(seed + 20);
        let x = DMatrix::from_fn(150, 3, |_, _| r.random_range(-1.0..1.0));
        let res = kmeans(&x, &KMeansConfig::new(12, seed)).unwrap();
        for w in res.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", res.history);
        }
    }
}

#[test]
fn centroids_within_data_range() {
    let mut r = rng(4);
    let x = DMatrix::from_fn(120, 2, |_, j| if j == 0 { r.random_range(-5.0..1.0) } else { r.random_range(2.0..3.0) });
    let c = kmeans_inducing(&x, &KMeansConfig::new(10, 3)).unwrap();
    for j in 0..2 {
        let (lo, hi) = (x.column(j).min(), x.column(j).max());
        assert!(c.column(j).iter().all(|&v| v >= lo && v <= hi));
    }
}

#[test]
fn deterministic_and_order_free() {
    let mut r = rng(5);
    let x = DMatrix::from_fn(80, 2, |_, _| r.random_range(-2.0..2.0));
    let cfg = KMeansConfig::new(6, 99);
    let one = kmeans_inducing(&x, &cfg).unwrap();
    assert_eq!(one, kmeans_inducing(&x, &cfg).unwrap());
    let perm = DMatrix::from_fn(80, 2, |i, j| x[((i * 37) % 80, j)]);
    assert_eq!(one, kmeans_inducing(&perm, &cfg).unwrap());
}

#[test]
fn too_many_centroids_rejected() {
    let x = DMatrix::zeros(3, 1);
    assert!(matches!(kmeans_inducing(&x, &KMeansConfig::new(4, 0)), Err(Error::InvalidConfig(_))));
}

#[test]
fn duplicate_points_do_not_break_seeding() {
    let x = DMatrix::from_element(6, 2, 1.5);
    let c = kmeans_inducing(&x, &KMeansConfig::new(3, 0)).unwrap();
    assert!(c.iter().all(|&v| v == 1.5));
}
