//! Dense symmetric linear algebra: jittered Cholesky, triangular solves and
//! the Gaussian KL divergence shared by every bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_check, Error, Result};

/// Default base jitter, multiplied by the mean of the diagonal.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// Number of ×10 escalations after the first non-zero jitter attempt.
const JITTER_ESCALATIONS: i32 = 5;

/// Lower Cholesky factor of `A + jitter_used·I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Absolute amount added to the diagonal before factorizing.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn into_lower(self) -> DMatrix<f64> {
        self.lower
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        solve_lower(&self.lower, b)
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        solve_lower_vec(&self.lower, b)
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .tr_solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper_vec(&self.solve_lower_vec(b))
    }

    /// Explicit inverse of `L Lᵀ`. Only meant for small matrices.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// Solves `L x = b` for lower-triangular `L` with non-zero diagonal.
pub fn solve_lower(lower: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    lower
        .solve_lower_triangular(b)
        .expect("triangular factor has a non-zero diagonal")
}

pub fn solve_lower_vec(lower: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    lower
        .solve_lower_triangular(b)
        .expect("triangular factor has a non-zero diagonal")
}

/// Checks symmetry to within `1e-12` relative tolerance and finiteness.
pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    dim_check(a.is_square(), || {
        format!("expected a square matrix, got {}x{}", a.nrows(), a.ncols())
    })?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix has non-finite entries".into()));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::DimensionMismatch(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Plain Cholesky of the lower triangle; `None` when a pivot is not positive.
fn cholesky_plain(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Factorizes `A + jI`, trying `j = 0` first and then
/// `base_jitter·10^k·mean(diag A)` for `k = 0..=5`.
pub fn cholesky_with_jitter(a: &DMatrix<f64>, base_jitter: f64) -> Result<CholFactor> {
    check_symmetric(a)?;
    dim_check(a.nrows() > 0, || "empty matrix".into())?;
    if let Some(lower) = cholesky_plain(a, 0.0) {
        return Ok(CholFactor {
            lower,
            jitter_used: 0.0,
        });
    }
    let mean_diag = a.diagonal().mean();
    // a non-positive mean diagonal has no natural scale
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 0.0;
    if base_jitter > 0.0 {
        for k in 0..=JITTER_ESCALATIONS {
            jitter = base_jitter * 10f64.powi(k) * scale;
            if let Some(lower) = cholesky_plain(a, jitter) {
                return Ok(CholFactor {
                    lower,
                    jitter_used: jitter,
                });
            }
        }
    }
    Err(Error::NotPositiveDefinite { max_jitter: jitter })
}

/// `KL[N(m, L Lᵀ) ‖ N(0, K)]` with `K` given by its Cholesky factor.
pub fn gauss_kl(m: &DVector<f64>, l: &DMatrix<f64>, k_chol: &CholFactor) -> Result<f64> {
    let dim = k_chol.dim();
    dim_check(m.len() == dim, || {
        format!("mean has length {}, prior has dimension {dim}", m.len())
    })?;
    dim_check(l.nrows() == dim && l.ncols() == dim, || {
        format!("factor is {}x{}, expected {dim}x{dim}", l.nrows(), l.ncols())
    })?;
    let trace = k_chol.solve_lower(l).norm_squared();
    let mahalanobis = k_chol.solve_lower_vec(m).norm_squared();
    let log_det_s = 2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    Ok(0.5 * (trace + mahalanobis - dim as f64 + k_chol.log_det() - log_det_s))
}

/// Lower triangle of `a` (diagonal included), zero above.
pub fn lower_triangle(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose();
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn identity_needs_no_jitter() {
        let c = cholesky_with_jitter(&DMatrix::identity(3, 3), 1e-6).unwrap();
        assert_eq!(c.lower(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(c.jitter_used(), 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let c = cholesky_with_jitter(&a, 1e-6).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert_abs_diff_eq!(c.lower(), &want, epsilon = 1e-15);
    }

    #[test]
    fn rank_one_escalates_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let c = cholesky_with_jitter(&a, 1e-6).unwrap();
        assert!(c.jitter_used() > 0.0);
        let err = (c.reconstruct() - &a).amax();
        assert!(err <= c.jitter_used() + 1e-10, "err {err}");
    }

    #[test]
    fn indefinite_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_with_jitter(&a, 1e-6),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(cholesky_with_jitter(&a, 1e-6).is_err());
    }

    #[test]
    fn roundtrip_on_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..100 {
            let n = 1 + trial % 32;
            let rank = if trial % 3 == 0 { (n / 2).max(1) } else { n + 2 };
            let a = random_psd(&mut rng, n, rank);
            let c = cholesky_with_jitter(&a, DEFAULT_JITTER).unwrap();
            let target = &a + DMatrix::identity(n, n) * c.jitter_used();
            let err = (c.reconstruct() - target).amax();
            assert!(err <= 1e-10 * a.amax().max(1.0), "n={n} err={err}");
            assert!(c.lower().diagonal().iter().all(|&d| d > 0.0));
        }
    }

    #[test]
    fn triangular_solves_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..20 {
            let a = random_psd(&mut rng, n, n + 3);
            let c = cholesky_with_jitter(&a, DEFAULT_JITTER).unwrap();
            let b = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let x = c.solve_lower_vec(&b);
            assert!((c.lower() * x - &b).norm() <= 1e-10 * b.norm());
            let y = c.solve_upper_vec(&b);
            assert!((c.lower().transpose() * y - &b).norm() <= 1e-10 * b.norm());
        }
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let kc = cholesky_with_jitter(&k, 0.0).unwrap();
        let kl = gauss_kl(&DVector::zeros(2), kc.lower(), &kc).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn kl_unit_scalar() {
        let kc = cholesky_with_jitter(&DMatrix::identity(1, 1), 0.0).unwrap();
        let kl = gauss_kl(&DVector::from_element(1, 1.0), &DMatrix::identity(1, 1), &kc).unwrap();
        assert_abs_diff_eq!(kl, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let kc = cholesky_with_jitter(&DMatrix::identity(2, 2), 0.0).unwrap();
        let r = gauss_kl(&DVector::zeros(3), &DMatrix::identity(2, 2), &kc);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    /// Dense formula with explicit inverses and determinants.
    fn kl_dense(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
        let k_inv = k.clone().try_inverse().unwrap();
        let n = m.len() as f64;
        0.5 * ((&k_inv * s).trace() + (m.transpose() * &k_inv * m)[(0, 0)] - n
            + k.determinant().ln()
            - s.determinant().ln())
    }

    #[test]
    fn kl_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = random_psd(&mut rng, 4, 7) + DMatrix::identity(4, 4) * 0.1;
            let mut l = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-0.5..0.5));
            l = lower_triangle(&l);
            for i in 0..4 {
                l[(i, i)] = rng.random_range(0.2..1.5);
            }
            let m = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let kc = cholesky_with_jitter(&k, 0.0).unwrap();
            let got = gauss_kl(&m, &l, &kc).unwrap();
            let want = kl_dense(&m, &(&l * l.transpose()), &k);
            assert_abs_diff_eq!(got, want, epsilon = 1e-9 * want.abs().max(1.0));
            assert!(got >= -1e-10);
        }
    }
}
