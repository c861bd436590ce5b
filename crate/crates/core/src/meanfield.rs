//! The sparse mean-field method on the augmented model `gₙ = fₙ + εₙ`,
//! `yₙ = 1[gₙ > 0]`.
//!
//! With `q(g) = Πₙ q(gₙ)` and `P = [Q_nn + I]⁻¹` the optimal factors are
//! `N(gₙ | aₙ, 1/Pₙₙ)` truncated to the label's side of zero, and
//!
//! ```text
//! B = Σ log γₙ − ½ log|Q+I| − ½ tr(P E[g gᵀ])
//!     + ½ Σ {log σ̃ₙ² + E[(aₙ − gₙ)²] / σ̃ₙ²} − ½ tr(K_nn − Q_nn)
//! ```
//!
//! Every N×N quantity goes through `W = L_B⁻¹ L_K⁻¹ K_mn`, where
//! `L_B L_Bᵀ = I + L_K⁻¹ K_mn K_nm L_K⁻ᵀ`, so that `P = I − Wᵀ W`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::kernels::KernelSpec;
use crate::likelihood::{inv_mills_with_shift, label_sign, log_norm_cdf, norm_cdf, PROB_FLOOR};
use crate::linalg::{cholesky_with_jitter, CholFactor};
use crate::svgp::{kmm_chol, PredictiveMarginals, VARIANCE_FLOOR};

/// Inducing inputs, site means and the site precisions they were last
/// optimized against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    pub z: DMatrix<f64>,
    pub a: DVector<f64>,
    /// `diag([Q_nn + I]⁻¹)`; empty until computed.
    #[serde(default)]
    pub precisions: Vec<f64>,
}

impl MeanFieldState {
    pub fn new(z: DMatrix<f64>, a: DVector<f64>) -> Result<Self> {
        let state = Self {
            z,
            a,
            precisions: Vec::new(),
        };
        state.validate()?;
        Ok(state)
    }

    /// Sites start at `sₙ = 2yₙ − 1`.
    pub fn initial(z: DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let a = DVector::from_iterator(y.len(), y.iter().map(|&v| label_sign(v)));
        Self::new(z, a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("site means".into()));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inducing inputs".into()));
        }
        dim_check(self.z.nrows() >= 1, || "no inducing inputs".into())?;
        dim_check(self.precisions.is_empty() || self.precisions.len() == self.a.len(), || {
            format!("{} cached precisions for {} sites", self.precisions.len(), self.a.len())
        })?;
        if self.precisions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::NonFinite("cached precision outside (0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }
}

/// Moments of a Gaussian truncated to one side of zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussianMoments {
    pub log_norm: f64,
    pub mean: f64,
    pub second_moment: f64,
}

impl TruncatedGaussianMoments {
    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean * self.mean
    }
}

/// One factor `q(gₙ)` with the pieces the gradients need.
#[derive(Debug, Clone, Copy)]
struct Site {
    sign: f64,
    z: f64,
    lambda: f64,
    log_norm: f64,
    mean: f64,
    second: f64,
    /// `∂mean/∂a`, equal to the variance ratio `1 − λ(z + λ)`.
    d_mean_d_a: f64,
}

fn site(sign: f64, a: f64, precision: f64) -> Site {
    let sd = 1.0 / precision.sqrt();
    let z = sign * a / sd;
    let (lambda, shift) = inv_mills_with_shift(z);
    let ratio = (1.0 - lambda * shift).max(0.0);
    let mean = a + sign * sd * lambda;
    let var = (ratio * sd * sd).max(f64::MIN_POSITIVE);
    Site {
        sign,
        z,
        lambda,
        log_norm: log_norm_cdf(z),
        mean,
        second: var + mean * mean,
        d_mean_d_a: ratio,
    }
}

/// Moments of `N(g | a, var)` truncated to `g > 0` for `y = 1`, `g < 0` otherwise.
pub fn truncated_moments(y: f64, a: f64, var: f64) -> TruncatedGaussianMoments {
    let s = site(label_sign(y), a, 1.0 / var);
    TruncatedGaussianMoments {
        log_norm: s.log_norm,
        mean: s.mean,
        second_moment: s.second,
    }
}

/// Factorizations shared by the bound, the inner loop and predictions.
struct Core {
    kmm: CholFactor,
    knm: DMatrix<f64>,
    /// M×N, `P = I − Wᵀ W`.
    w: DMatrix<f64>,
    precisions: DVector<f64>,
    log_det_b: f64,
    /// `tr(K_nn − Q_nn)`.
    trace_gap: f64,
}

impl Core {
    fn new(spec: &KernelSpec, z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Self> {
        dim_check(z.ncols() == spec.input_dim() && x.ncols() == spec.input_dim(), || {
            format!(
                "inputs have {} and {} columns, kernel expects {}",
                z.ncols(),
                x.ncols(),
                spec.input_dim()
            )
        })?;
        let kmm = kmm_chol(spec, z)?;
        let knm = spec.gram(x, z)?;
        let kdiag = spec.gram_diag(x)?;
        let v = kmm.solve_lower(&knm.transpose());
        let m = z.nrows();
        let b = DMatrix::identity(m, m) + &v * v.transpose();
        let lb = cholesky_with_jitter(&b, 0.0)?;
        let w = lb.solve_lower(&v);
        let precisions = DVector::from_iterator(
            x.nrows(),
            w.column_iter().map(|c| (1.0 - c.norm_squared()).clamp(f64::MIN_POSITIVE, 1.0)),
        );
        let trace_gap = kdiag.sum() - v.norm_squared();
        Ok(Self {
            kmm,
            knm,
            w,
            precisions,
            log_det_b: lb.log_det(),
            trace_gap,
        })
    }

    fn n(&self) -> usize {
        self.knm.nrows()
    }

    /// `P v`.
    fn apply_p(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.w.tr_mul(&(&self.w * v))
    }

    fn apply_p_mat(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        v - self.w.tr_mul(&(&self.w * v))
    }

    fn sites(&self, signs: &[f64], a: &DVector<f64>) -> Vec<Site> {
        (0..self.n()).map(|n| site(signs[n], a[n], self.precisions[n])).collect()
    }

    fn value(&self, a: &DVector<f64>, sites: &[Site], w_eta: &DVector<f64>) -> f64 {
        let mut sum_log_norm = 0.0;
        let mut eta_sq = 0.0;
        let mut diag_part = 0.0;
        let mut site_part = 0.0;
        for (n, s) in sites.iter().enumerate() {
            let p = self.precisions[n];
            sum_log_norm += s.log_norm;
            eta_sq += s.mean * s.mean;
            diag_part += p * (s.second - s.mean * s.mean);
            site_part += -p.ln() + p * (s.second - 2.0 * a[n] * s.mean + a[n] * a[n]);
        }
        let quad = eta_sq - w_eta.norm_squared() + diag_part;
        sum_log_norm - 0.5 * self.log_det_b - 0.5 * quad + 0.5 * site_part - 0.5 * self.trace_gap
    }
}

fn check_labels(x: &DMatrix<f64>, a: &DVector<f64>, y: &[f64]) -> Result<Vec<f64>> {
    dim_check(x.nrows() == a.len() && y.len() == a.len(), || {
        format!("{} inputs, {} labels and {} sites", x.nrows(), y.len(), a.len())
    })?;
    dim_check(!y.is_empty(), || "empty data".into())?;
    Ok(y.iter().map(|&v| label_sign(v)).collect())
}

/// `diag([Q_nn + I]⁻¹)` in O(NM²).
pub fn site_precisions(spec: &KernelSpec, z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(Core::new(spec, z, x)?.precisions)
}

/// Bound value and gradients. `grad_z` and `grad_kernel` hold the sites fixed.
#[derive(Debug, Clone)]
pub struct MfBoundReport {
    pub value: f64,
    pub grad_a: DVector<f64>,
    pub grad_z: DMatrix<f64>,
    pub grad_kernel: Vec<f64>,
}

/// The mean-field bound and its gradients.
pub fn mf_bound(spec: &KernelSpec, state: &MeanFieldState, x: &DMatrix<f64>, y: &[f64]) -> Result<MfBoundReport> {
    state.validate()?;
    let signs = check_labels(x, &state.a, y)?;
    let core = Core::new(spec, &state.z, x)?;
    let a = &state.a;
    let n = core.n();
    let sites = core.sites(&signs, a);
    let eta = DVector::from_iterator(n, sites.iter().map(|s| s.mean));
    let w_eta = &core.w * &eta;
    let value = core.value(a, &sites, &w_eta);

    let p_eta = &eta - core.w.tr_mul(&w_eta);
    let mut grad_a = DVector::zeros(n);
    // ∂B/∂pₙ with the sites fixed
    let mut c = DVector::zeros(n);
    for (i, s) in sites.iter().enumerate() {
        let p = core.precisions[i];
        let pull = s.sign * s.lambda * p.sqrt() - p_eta[i];
        grad_a[i] = pull * s.d_mean_d_a;
        let shift = s.z + s.lambda;
        let d_mean_d_p = -s.sign * s.lambda * (1.0 + s.z * shift) / (2.0 * p * p.sqrt());
        c[i] = (s.lambda * shift - 1.0) / (2.0 * p) + pull * d_mean_d_p;
    }

    // G = −P diag(c) P − ½P + ½(Pη)(Pη)ᵀ + ½I is ∂B/∂Q_nn; only G A is needed.
    let a_mat = core.kmm.solve(&core.knm.transpose()).transpose();
    let pa = core.apply_p_mat(&a_mat);
    let mut cpa = pa.clone();
    for i in 0..n {
        cpa.row_mut(i).scale_mut(c[i]);
    }
    let ga = -core.apply_p_mat(&cpa) - &pa * 0.5 + &p_eta * (p_eta.tr_mul(&a_mat)) * 0.5 + &a_mat * 0.5;
    let g_knm = &ga * 2.0;
    let g_kmm = -a_mat.tr_mul(&ga);

    let cross = spec.gram_grads(&state.z, x, &g_knm.transpose())?;
    let sym = spec.gram_sym_grads(&state.z, &g_kmm)?;
    let diag = spec.gram_diag_grads(x, &DVector::from_element(n, -0.5))?;
    let grad_kernel = cross
        .params
        .iter()
        .zip(&sym.params)
        .zip(&diag.params)
        .map(|((a, b), c)| a + b + c)
        .collect();
    Ok(MfBoundReport {
        value,
        grad_a,
        grad_z: cross.inputs + sym.inputs,
        grad_kernel,
    })
}

/// What the inner loop did.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopInfo {
    /// Sweeps that raised the bound by at least `tol`.
    pub iterations: usize,
    pub converged: bool,
    /// Bound before the loop and after every accepted sweep.
    pub bounds: Vec<f64>,
}

/// Coordinate ascent on the site means with `Z` and the kernel fixed.
///
/// Each site is set to the maximizer of the bound given the others,
/// `aₙ = ηₙ − (Pη)ₙ / Pₙₙ`, with `Wη` updated in place, so a sweep is O(NM).
pub fn mf_inner_loop(
    state: &MeanFieldState,
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<(MeanFieldState, InnerLoopInfo)> {
    state.validate()?;
    let signs = check_labels(x, &state.a, y)?;
    let core = Core::new(spec, &state.z, x)?;
    let n = core.n();
    let mut a = state.a.clone();
    let mut sites = core.sites(&signs, &a);
    let mut eta = DVector::from_iterator(n, sites.iter().map(|s| s.mean));
    let mut w_eta = &core.w * &eta;
    let mut bound = core.value(&a, &sites, &w_eta);
    if !bound.is_finite() {
        return Err(Error::NonFinite("mean-field bound at the initial sites".into()));
    }
    let mut info = InnerLoopInfo {
        iterations: 0,
        converged: false,
        bounds: vec![bound],
    };

    for _ in 0..max_iters {
        let mut next_a = a.clone();
        let mut next_sites = sites.clone();
        let mut next_eta = eta.clone();
        let mut r = w_eta.clone();
        for i in 0..n {
            let col = core.w.column(i);
            let p_eta = next_eta[i] - col.dot(&r);
            next_a[i] = next_eta[i] - p_eta / core.precisions[i];
            next_sites[i] = site(signs[i], next_a[i], core.precisions[i]);
            let delta = next_sites[i].mean - next_eta[i];
            next_eta[i] = next_sites[i].mean;
            r.axpy(delta, &col, 1.0);
        }
        let r = &core.w * &next_eta;
        let next_bound = core.value(&next_a, &next_sites, &r);
        if !(next_bound >= bound) {
            info.converged = true;
            break;
        }
        let gain = next_bound - bound;
        a = next_a;
        sites = next_sites;
        eta = next_eta;
        w_eta = r;
        bound = next_bound;
        info.bounds.push(bound);
        if gain < tol {
            info.converged = true;
            break;
        }
        info.iterations += 1;
    }

    let out = MeanFieldState {
        z: state.z.clone(),
        a,
        precisions: core.precisions.iter().copied().collect(),
    };
    Ok((out, info))
}

/// How `mf_predict` handles the site posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MfPredictMode {
    /// Samples of the truncated factors pushed through `p(g⋆ | g)`.
    MonteCarlo { samples: usize, seed: u64 },
    /// Gaussian `q(u)` with `Σ = K_mm − K_mn [Q_nn + I]⁻¹ K_nm`.
    GaussianApprox,
}

#[derive(Debug, Clone)]
pub struct MfPrediction {
    pub marginals: PredictiveMarginals,
    /// Monte-Carlo standard error of each class probability.
    pub prob_std_err: Option<DVector<f64>>,
}

/// Standard normal draw conditioned on `w > c`.
fn truncated_standard_normal(rng: &mut ChaCha8Rng, c: f64) -> f64 {
    if c < 0.45 {
        loop {
            let w: f64 = rng.sample(StandardNormal);
            if w > c {
                return w;
            }
        }
    }
    let rate = 0.5 * (c + (c * c + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let w = c + e / rate;
        let u: f64 = rng.random();
        if u <= (-0.5 * (w - rate) * (w - rate)).exp() {
            return w;
        }
    }
}

/// Predictions at `x_star` from sites fitted to `(x, y)`.
pub fn mf_predict(
    spec: &KernelSpec,
    state: &MeanFieldState,
    x: &DMatrix<f64>,
    y: &[f64],
    x_star: &DMatrix<f64>,
    mode: MfPredictMode,
) -> Result<MfPrediction> {
    state.validate()?;
    let signs = check_labels(x, &state.a, y)?;
    dim_check(x_star.ncols() == spec.input_dim(), || {
        format!("inputs have {} columns, kernel expects {}", x_star.ncols(), spec.input_dim())
    })?;
    let core = Core::new(spec, &state.z, x)?;
    let n = core.n();
    let t = x_star.nrows();

    // H = K_mn P K_nm
    let w_knm = &core.w * &core.knm;
    let h = core.knm.tr_mul(&core.knm) - w_knm.tr_mul(&w_knm);
    let a_star = core.kmm.solve(&spec.gram(x_star, &state.z)?.transpose());
    let kss = spec.gram_diag(x_star)?;
    let latent_var = DVector::from_fn(t, |j, _| {
        let col = a_star.column(j);
        (kss[j] - col.dot(&(&h * col))).max(VARIANCE_FLOOR)
    });

    match mode {
        MfPredictMode::GaussianApprox => {
            let eta = DVector::from_iterator(n, core.sites(&signs, &state.a).iter().map(|s| s.mean));
            let mu_u = core.knm.tr_mul(&core.apply_p(&eta));
            let means = a_star.tr_mul(&mu_u);
            Ok(MfPrediction {
                marginals: PredictiveMarginals::from_latent(means, latent_var),
                prob_std_err: None,
            })
        }
        MfPredictMode::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::InvalidConfig("Monte-Carlo prediction needs at least 2 samples".into()));
            }
            let sd: Vec<f64> = core.precisions.iter().map(|p| 1.0 / p.sqrt()).collect();
            // g⋆ | g has mean (A⋆ K_mn P) g and this variance
            let proj = a_star.tr_mul(&core.knm.transpose());
            let proj = core.apply_p_mat(&proj.transpose()).transpose();
            let noisy_sd = latent_var.map(|v| (1.0 + v).sqrt());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = DVector::zeros(n);
            let mut prob_sum = DVector::<f64>::zeros(t);
            let mut prob_sq = DVector::<f64>::zeros(t);
            let mut mean_sum = DVector::zeros(t);
            let mut mean_sq = DVector::<f64>::zeros(t);
            for _ in 0..samples {
                for i in 0..n {
                    let c = -signs[i] * state.a[i] / sd[i];
                    g[i] = state.a[i] + signs[i] * sd[i] * truncated_standard_normal(&mut rng, c);
                }
                let mu = &proj * &g;
                for j in 0..t {
                    let p = norm_cdf(mu[j] / noisy_sd[j]);
                    prob_sum[j] += p;
                    prob_sq[j] += p * p;
                    mean_sum[j] += mu[j];
                    mean_sq[j] += mu[j] * mu[j];
                }
            }
            let s = samples as f64;
            let probs = prob_sum.map(|v| (v / s).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR));
            let prob_std_err = DVector::from_fn(t, |j, _| {
                let m = prob_sum[j] / s;
                ((prob_sq[j] / s - m * m).max(0.0) / (s - 1.0)).sqrt()
            });
            let means = mean_sum / s;
            let variances = DVector::from_fn(t, |j, _| {
                (mean_sq[j] / s - means[j] * means[j]).max(0.0) + latent_var[j]
            });
            Ok(MfPrediction {
                marginals: PredictiveMarginals {
                    means,
                    variances,
                    probs,
                },
                prob_std_err: Some(prob_std_err),
            })
        }
    }
}
