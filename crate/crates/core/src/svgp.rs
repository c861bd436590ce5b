//! The sparse variational bound with `q(u) = N(m, L Lᵀ)`.
//!
//! With `A = Knm Kmm⁻¹` the latent marginals are
//! `q(f) = N(A m, Knn + A (S − Kmm) Aᵀ)`, and the bound is
//!
//! ```text
//! ELBO = (N / B) Σₙ E_{q(fₙ)}[log p(yₙ | fₙ)] − KL[q(u) ‖ p(u)]
//! ```
//!
//! Classification evaluates the expectations by Gauss–Hermite quadrature; the
//! Gaussian likelihood uses the closed form, which reproduces the uncollapsed
//! regression bound. Both share the gradient assembly below.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::kernels::KernelSpec;
use crate::likelihood::{
    gaussian_expectations, predictive_prob, variational_expectations, GaussHermiteRule,
    LatentMarginal, VarExp,
};
use crate::linalg::{cholesky_with_jitter, gauss_kl, lower_triangle, CholFactor, DEFAULT_JITTER};

/// Latent variances below this are clamped.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Inducing inputs and the Gaussian `q(u) = N(m, L Lᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub z: DMatrix<f64>,
    pub m: DVector<f64>,
    pub l: DMatrix<f64>,
}

impl VariationalState {
    pub fn new(z: DMatrix<f64>, m: DVector<f64>, l: DMatrix<f64>) -> Result<Self> {
        let state = Self { z, m, l };
        state.validate()?;
        Ok(state)
    }

    /// `m = 0`, `L = chol(Kmm)`, so that `q(u) = p(u)` and the KL term vanishes.
    pub fn from_prior(spec: &KernelSpec, z: DMatrix<f64>) -> Result<Self> {
        let kmm = kmm_chol(spec, &z)?;
        let m = DVector::zeros(z.nrows());
        Self::new(z, m, kmm.into_lower())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.z.nrows();
        dim_check(m >= 1, || "need at least one inducing point".into())?;
        dim_check(self.m.len() == m, || {
            format!("mean has {} entries for {m} inducing points", self.m.len())
        })?;
        dim_check(self.l.shape() == (m, m), || {
            format!("factor is {:?}, expected ({m}, {m})", self.l.shape())
        })?;
        if self.l.diagonal().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidConfig("factor diagonal must be positive".into()));
        }
        if self.z.iter().chain(self.m.iter()).chain(self.l.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational state".into()));
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Marginals of `q(f)` at a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QfMarginals {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
}

impl QfMarginals {
    pub fn get(&self, n: usize) -> LatentMarginal {
        LatentMarginal::new(self.means[n], self.variances[n])
    }
}

/// Latent and class-probability predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMarginals {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
    pub probs: DVector<f64>,
}

impl PredictiveMarginals {
    pub fn from_latent(means: DVector<f64>, variances: DVector<f64>) -> Self {
        let probs = DVector::from_fn(means.len(), |i, _| {
            predictive_prob(LatentMarginal::new(means[i], variances[i]))
        });
        Self {
            means,
            variances,
            probs,
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Bound value and gradients for every parameter block.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub elbo: f64,
    pub grad_m: DVector<f64>,
    /// Lower triangular, natural (not log) diagonal.
    pub grad_l: DMatrix<f64>,
    pub grad_z: DMatrix<f64>,
    /// With respect to the flat log-hyperparameters.
    pub grad_kernel: Vec<f64>,
    /// With respect to the log noise variance (Gaussian likelihood only).
    pub grad_log_noise: Option<f64>,
    pub scale: f64,
}

/// Gaussian observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub variance: f64,
}

impl GaussianNoise {
    pub fn new(variance: f64) -> Result<Self> {
        if variance > 0.0 && variance.is_finite() {
            Ok(Self { variance })
        } else {
            Err(Error::NonPositiveHyperparameter(format!("noise variance {variance}")))
        }
    }
}

pub(crate) fn kmm_chol(spec: &KernelSpec, z: &DMatrix<f64>) -> Result<CholFactor> {
    cholesky_with_jitter(&spec.gram_sym(z)?, DEFAULT_JITTER)
}

/// Quantities shared by marginals, bounds and predictions.
struct Projection {
    chol: CholFactor,
    /// `R⁻¹ Kmn` for `Kmm = R Rᵀ`; its column norms give `diag(Qnn)`
    /// without the cancellation of `kᵀ Kmm⁻¹ k`.
    half: DMatrix<f64>,
    /// `Kmm⁻¹ Kmn`, i.e. `Aᵀ` (M×B).
    a_t: DMatrix<f64>,
    kdiag: DVector<f64>,
}

impl Projection {
    fn new(spec: &KernelSpec, z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Self> {
        let chol = kmm_chol(spec, z)?;
        let knm = spec.gram(x, z)?;
        let half = chol.solve_lower(&knm.transpose());
        let a_t = chol.solve_upper(&half);
        let kdiag = spec.gram_diag(x)?;
        Ok(Self {
            chol,
            half,
            a_t,
            kdiag,
        })
    }

    /// Per column, so a point's marginal does not depend on the rest of the batch.
    fn marginals(&self, m: &DVector<f64>, l: &DMatrix<f64>) -> QfMarginals {
        let b = self.a_t.ncols();
        let mut means = DVector::zeros(b);
        let mut variances = DVector::zeros(b);
        for n in 0..b {
            let a = self.a_t.column(n);
            means[n] = a.dot(m);
            let lta = l.tr_mul(&a);
            let v = self.kdiag[n] - self.half.column(n).norm_squared() + lta.norm_squared();
            variances[n] = v.max(VARIANCE_FLOOR);
        }
        QfMarginals { means, variances }
    }
}

fn check_batch(spec: &KernelSpec, state: &VariationalState, x: &DMatrix<f64>) -> Result<()> {
    state.validate()?;
    dim_check(state.z.ncols() == spec.input_dim(), || {
        format!(
            "inducing inputs have {} columns, kernel expects {}",
            state.z.ncols(),
            spec.input_dim()
        )
    })?;
    dim_check(x.ncols() == spec.input_dim(), || {
        format!("inputs have {} columns, kernel expects {}", x.ncols(), spec.input_dim())
    })
}

/// Marginal means and variances of `q(f)` at the rows of `x`.
pub fn qf_marginals(spec: &KernelSpec, state: &VariationalState, x: &DMatrix<f64>) -> Result<QfMarginals> {
    check_batch(spec, state, x)?;
    Ok(Projection::new(spec, &state.z, x)?.marginals(&state.m, &state.l))
}

/// Shared assembly: `point(n, q_n)` returns the expected log-likelihood of
/// point `n` and its derivatives with respect to the marginal.
fn assemble(
    spec: &KernelSpec,
    state: &VariationalState,
    x: &DMatrix<f64>,
    total_n: usize,
    mut point: impl FnMut(usize, LatentMarginal) -> VarExp,
) -> Result<BoundReport> {
    check_batch(spec, state, x)?;
    let b = x.nrows();
    dim_check(b >= 1, || "empty batch".into())?;
    if total_n < b {
        return Err(Error::InvalidConfig(format!(
            "total size {total_n} is smaller than the batch {b}"
        )));
    }
    let scale = total_n as f64 / b as f64;
    let proj = Projection::new(spec, &state.z, x)?;
    let marg = proj.marginals(&state.m, &state.l);

    let mut data = 0.0;
    let mut g_mu = DVector::zeros(b);
    let mut g_var = DVector::zeros(b);
    for n in 0..b {
        let ve = point(n, marg.get(n));
        data += ve.value;
        g_mu[n] = scale * ve.d_mean;
        g_var[n] = scale * ve.d_var;
    }
    let kl = gauss_kl(&state.m, &state.l, &proj.chol)?;
    let elbo = scale * data - kl;

    let m_dim = state.num_inducing();
    let kmm_inv = proj.chol.inverse();
    let a = proj.a_t.transpose();
    let s = state.covariance();
    let kmm = proj.chol.reconstruct();

    // Aᵀ diag(g_var) A
    let mut a_scaled = a.clone();
    for n in 0..b {
        a_scaled.row_mut(n).scale_mut(g_var[n]);
    }
    let atda = a.transpose() * &a_scaled;

    let grad_m = a.transpose() * &g_mu - &kmm_inv * &state.m;

    let mut grad_l = (&atda * &state.l) * 2.0 - &kmm_inv * &state.l;
    for i in 0..m_dim {
        grad_l[(i, i)] += 1.0 / state.l[(i, i)];
    }
    let grad_l = lower_triangle(&grad_l);

    // ∂/∂A of the data term, then through A = Knm Kmm⁻¹
    let g_a = &g_mu * state.m.transpose() + (&a_scaled * (&s - &kmm)) * 2.0;
    let g_knm = (&kmm_inv * g_a.transpose()).transpose();
    let ss_mm = &s + &state.m * state.m.transpose();
    let d_kl_kmm = (&kmm_inv - &kmm_inv * ss_mm * &kmm_inv) * 0.5;
    let g_kmm = -&atda - a.transpose() * &g_knm - d_kl_kmm;

    let cross = spec.gram_grads(&state.z, x, &g_knm.transpose())?;
    let sym = spec.gram_sym_grads(&state.z, &g_kmm)?;
    let diag = spec.gram_diag_grads(x, &g_var)?;
    let grad_kernel = cross
        .params
        .iter()
        .zip(&sym.params)
        .zip(&diag.params)
        .map(|((a, b), c)| a + b + c)
        .collect();
    let grad_z = cross.inputs + sym.inputs;

    Ok(BoundReport {
        elbo,
        grad_m,
        grad_l,
        grad_z,
        grad_kernel,
        grad_log_noise: None,
        scale,
    })
}

/// Classification bound on a batch, scaled to `total_n` points.
pub fn elbo_classification(
    spec: &KernelSpec,
    state: &VariationalState,
    x: &DMatrix<f64>,
    y: &[f64],
    total_n: usize,
    rule: &GaussHermiteRule,
) -> Result<BoundReport> {
    dim_check(y.len() == x.nrows(), || {
        format!("{} labels for {} inputs", y.len(), x.nrows())
    })?;
    assemble(spec, state, x, total_n, |n, q| variational_expectations(y[n], q, rule))
}

/// Gaussian-likelihood bound with explicit `q(u)`, scaled to `total_n` points.
pub fn elbo_gaussian(
    spec: &KernelSpec,
    state: &VariationalState,
    x: &DMatrix<f64>,
    y: &[f64],
    noise: GaussianNoise,
    total_n: usize,
) -> Result<BoundReport> {
    dim_check(y.len() == x.nrows(), || {
        format!("{} targets for {} inputs", y.len(), x.nrows())
    })?;
    let mut d_noise = 0.0;
    let mut report = assemble(spec, state, x, total_n, |n, q| {
        let (ve, dn) = gaussian_expectations(y[n], q, noise.variance);
        d_noise += dn;
        ve
    })?;
    report.grad_log_noise = Some(report.scale * d_noise * noise.variance);
    Ok(report)
}

/// Collapsed regression bound `log N(y | 0, Qnn + σ²I) − tr(Knn − Qnn)/(2σ²)`.
pub fn titsias_bound(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    z: &DMatrix<f64>,
    noise: GaussianNoise,
) -> Result<f64> {
    dim_check(y.len() == x.nrows(), || {
        format!("{} targets for {} inputs", y.len(), x.nrows())
    })?;
    let n = x.nrows() as f64;
    let s2 = noise.variance;
    let chol = kmm_chol(spec, z)?;
    let kmn = spec.gram(z, x)?;
    let v = chol.solve_lower(&kmn);
    let m = z.nrows();
    let b = DMatrix::identity(m, m) + &v * v.transpose() / s2;
    let b_chol = cholesky_with_jitter(&b, 0.0)?;
    let y = DVector::from_column_slice(y);
    let c = b_chol.solve_lower_vec(&(&v * &y));
    let quad = (y.norm_squared() - c.norm_squared() / s2) / s2;
    let log_det = n * s2.ln() + b_chol.log_det();
    let trace = spec.gram_diag(x)?.sum() - v.norm_squared();
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + quad) - 0.5 * trace / s2)
}

/// The unique maximizer of [`elbo_gaussian`] over `(m, S)` at fixed `Z`:
/// `S = Kmm Σ⁻¹ Kmm`, `m = σ⁻² Kmm Σ⁻¹ Kmn y` with `Σ = Kmm + σ⁻² Kmn Knm`.
pub fn optimal_gaussian_state(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    z: &DMatrix<f64>,
    noise: GaussianNoise,
) -> Result<VariationalState> {
    let s2 = noise.variance;
    let kmm = kmm_chol(spec, z)?.reconstruct();
    let kmn = spec.gram(z, x)?;
    let sigma = &kmm + &kmn * kmn.transpose() / s2;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let sigma_chol = cholesky_with_jitter(&sigma, 0.0)?;
    let s = &kmm * sigma_chol.solve(&kmm);
    let s = (&s + s.transpose()) * 0.5;
    let m = &kmm * sigma_chol.solve_vec(&(&kmn * DVector::from_column_slice(y))) / s2;
    let l = cholesky_with_jitter(&s, DEFAULT_JITTER)?.into_lower();
    VariationalState::new(z.clone(), m, l)
}

/// Predictive latent marginals and class probabilities at `x_star`.
pub fn predict(spec: &KernelSpec, state: &VariationalState, x_star: &DMatrix<f64>) -> Result<PredictiveMarginals> {
    let q = qf_marginals(spec, state, x_star)?;
    Ok(PredictiveMarginals::from_latent(q.means, q.variances))
}
