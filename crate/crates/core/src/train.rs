//! Objectives that connect the bounds to the optimizers, and the training
//! entry points for each method.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::linalg::{cholesky_with_jitter, lower_triangle, solve_lower, solve_lower_vec, DEFAULT_JITTER};
use crate::likelihood::{label_sign, GaussHermiteRule, PROB_FLOOR};
use crate::meanfield::{mf_bound, mf_inner_loop, mf_predict, MeanFieldState, MfPredictMode};
use crate::optimize::{
    adadelta_optimize, full_batch_optimize, Block, Clock, Objective, OptimizeResult, OptimizerKind, ParamVector,
    StochasticObjective, TrainSchedule,
};
use crate::svgp::{elbo_classification, elbo_gaussian, predict, BoundReport, GaussianNoise, VariationalState};

/// Mean negative log probability of the labels and the error rate, with
/// probabilities clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` and ties at ½
/// predicted as class 1.
pub fn classification_metrics(probs: &[f64], y: &[f64]) -> (f64, f64) {
    if y.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut nlp = 0.0;
    let mut wrong = 0usize;
    for (&p, &t) in probs.iter().zip(y) {
        let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let positive = t > 0.5;
        nlp -= if positive { p.ln() } else { (1.0 - p).ln() };
        if (p >= 0.5) != positive {
            wrong += 1;
        }
    }
    let n = y.len() as f64;
    (nlp / n, wrong as f64 / n)
}

/// Mean negative log density and mean squared error of Gaussian predictions.
pub fn regression_metrics(means: &[f64], variances: &[f64], y: &[f64]) -> (f64, f64) {
    if y.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut nlp = 0.0;
    let mut sse = 0.0;
    for ((&m, &v), &t) in means.iter().zip(variances).zip(y) {
        let r = t - m;
        nlp += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + r * r / v);
        sse += r * r;
    }
    let n = y.len() as f64;
    (nlp / n, sse / n)
}

/// Change of coordinates for the variational blocks. The optimizer sees
/// `(v, L_v)` with `m = R v` and `L = R L_v`, for a lower triangular `R`
/// with positive diagonal, so `L` keeps its form. With `R` a Cholesky
/// factor of `K_mm` the blocks sit on unit scale however badly conditioned
/// `K_mm` is.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Preconditioner {
    #[default]
    Identity,
    Fixed(DMatrix<f64>),
    /// `R = chol(K_mm)` at the current `(Z, kernel)`, differentiated through.
    Whitened,
}

impl Preconditioner {
    pub fn identity() -> Self {
        Self::Identity
    }

    /// Fixed `R = chol(K_mm)` for the given kernel and inducing inputs.
    pub fn prior(spec: &KernelSpec, z: &DMatrix<f64>) -> Result<Self> {
        Ok(Self::Fixed(kmm_lower(spec, z)?.0))
    }

    pub fn whitened() -> Self {
        Self::Whitened
    }

    fn factor(&self, spec: &KernelSpec, z: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
        let m = z.nrows();
        match self {
            Self::Identity => Ok(None),
            Self::Fixed(r) if r.nrows() != m => Err(Error::DimensionMismatch(format!(
                "preconditioner is {}×{}, state has M = {m}",
                r.nrows(),
                r.ncols()
            ))),
            Self::Fixed(r) => Ok(Some(r.clone())),
            Self::Whitened => Ok(Some(kmm_lower(spec, z)?.0)),
        }
    }
}

/// Relative jitter in the preconditioner only; the bounds never see it.
/// Keeps `R` well conditioned when inducing inputs meet.
pub const WHITENING_JITTER: f64 = 1e-6;

/// `chol(K_mm + c·mean(diag K_mm)·I)` and the total relative jitter `c`.
fn kmm_lower(spec: &KernelSpec, z: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let mut k = spec.gram_sym(z)?;
    let scale = k.diagonal().mean();
    if !(scale > 0.0) {
        return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
    }
    for i in 0..k.nrows() {
        k[(i, i)] += WHITENING_JITTER * scale;
    }
    let chol = cholesky_with_jitter(&k, DEFAULT_JITTER)?;
    let rel = WHITENING_JITTER + chol.jitter_used() / scale;
    Ok((chol.into_lower(), rel))
}

fn to_inner(r: Option<&DMatrix<f64>>, m: &DVector<f64>, l: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    match r {
        None => (m.clone(), l.clone()),
        Some(r) => (solve_lower_vec(r, m), lower_triangle(&solve_lower(r, l))),
    }
}

/// Sensitivity of a function of `Σ = R Rᵀ` given its sensitivity to the
/// lower Cholesky factor `R`, as a symmetric matrix.
fn cholesky_backward(r: &DMatrix<f64>, r_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = lower_triangle(&r.tr_mul(r_bar));
    for i in 0..p.nrows() {
        p[(i, i)] *= 0.5;
    }
    // R⁻ᵀ P R⁻¹
    let x = r.tr_solve_lower_triangular(&p).expect("positive diagonal");
    let s = r.tr_solve_lower_triangular(&x.transpose()).expect("positive diagonal").transpose();
    (&s + s.transpose()) * 0.5
}

/// Lays out `(m, L, Z, kernel[, noise])`; the diagonal of `L` is stored as its log.
pub fn pack_svgp(spec: &KernelSpec, state: &VariationalState, noise: Option<GaussianNoise>) -> ParamVector {
    pack_svgp_with(spec, state, noise, &Preconditioner::identity()).expect("identity fits any state")
}

/// [`pack_svgp`] in preconditioned coordinates `(v, L_v)`.
pub fn pack_svgp_with(
    spec: &KernelSpec,
    state: &VariationalState,
    noise: Option<GaussianNoise>,
    pre: &Preconditioner,
) -> Result<ParamVector> {
    let m = state.num_inducing();
    let r = pre.factor(spec, &state.z)?;
    let (v, lv) = to_inner(r.as_ref(), &state.m, &state.l);
    let mut pv = ParamVector::new();
    pv.push_block(Block::Mean, v.as_slice());
    let mut chol = Vec::with_capacity(m * (m + 1) / 2);
    for i in 0..m {
        for j in 0..i {
            chol.push(lv[(i, j)]);
        }
        chol.push(lv[(i, i)].ln());
    }
    pv.push_block(Block::Chol, &chol);
    let z: Vec<f64> = state.z.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    pv.push_block(Block::Inducing, &z);
    pv.push_block(Block::Kernel, &spec.to_flat());
    if let Some(n) = noise {
        pv.push_block(Block::Noise, &[n.variance.ln()]);
    }
    Ok(pv)
}

fn unpack_z(pv: &ParamVector, dim: usize) -> Result<DMatrix<f64>> {
    let z = pv.block(Block::Inducing);
    if dim == 0 || !z.len().is_multiple_of(dim) || z.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} inducing values for dimension {dim}", z.len())));
    }
    Ok(DMatrix::from_row_slice(z.len() / dim, dim, z))
}

/// Inverse of [`pack_svgp`]; `template` supplies the kernel structure.
pub fn unpack_svgp(
    template: &KernelSpec,
    pv: &ParamVector,
) -> Result<(KernelSpec, VariationalState, Option<GaussianNoise>)> {
    unpack_svgp_with(template, pv, &Preconditioner::identity())
}

/// Inverse of [`pack_svgp_with`].
pub fn unpack_svgp_with(
    template: &KernelSpec,
    pv: &ParamVector,
    pre: &Preconditioner,
) -> Result<(KernelSpec, VariationalState, Option<GaussianNoise>)> {
    let spec = template.with_flat(pv.block(Block::Kernel))?;
    let z = unpack_z(pv, template.input_dim())?;
    let m = z.nrows();
    let v = DVector::from_column_slice(pv.block(Block::Mean));
    let chol = pv.block(Block::Chol);
    if v.len() != m || chol.len() != m * (m + 1) / 2 {
        return Err(Error::DimensionMismatch("parameter blocks disagree on M".into()));
    }
    let mut lv = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in 0..i {
            lv[(i, j)] = chol[k];
            k += 1;
        }
        lv[(i, i)] = chol[k].exp();
        k += 1;
    }
    let (mean, l) = match pre.factor(&spec, &z)? {
        None => (v, lv),
        Some(r) => (&r * v, &r * lv),
    };
    let noise = match pv.block(Block::Noise) {
        [] => None,
        [v] => Some(GaussianNoise::new(v.exp())?),
        _ => return Err(Error::DimensionMismatch("noise block".into())),
    };
    Ok((spec, VariationalState::new(z, mean, l)?, noise))
}

/// Gradient of a [`BoundReport`] in the [`pack_svgp`] layout.
pub fn pack_svgp_gradient(report: &BoundReport, state: &VariationalState) -> Vec<f64> {
    layout_gradient(
        &report.grad_m,
        &report.grad_l,
        &state.l,
        &report.grad_z,
        &report.grad_kernel,
        report.grad_log_noise,
    )
}

/// Gradient of a [`BoundReport`] in the [`pack_svgp_with`] layout.
pub fn pack_svgp_gradient_with(
    spec: &KernelSpec,
    report: &BoundReport,
    state: &VariationalState,
    pre: &Preconditioner,
) -> Result<Vec<f64>> {
    let m = state.num_inducing();
    let r = pre.factor(spec, &state.z)?;
    let (v, lv) = to_inner(r.as_ref(), &state.m, &state.l);
    let (gv, glv) = match &r {
        None => (report.grad_m.clone(), report.grad_l.clone()),
        Some(r) => (r.tr_mul(&report.grad_m), lower_triangle(&r.tr_mul(&report.grad_l))),
    };
    let mut grad_z = report.grad_z.clone();
    let mut grad_kernel = report.grad_kernel.clone();
    if let (Preconditioner::Whitened, Some(r)) = (pre, &r) {
        // R moves with (Z, kernel)
        let r_bar = lower_triangle(&(&report.grad_m * v.transpose() + &report.grad_l * lv.transpose()));
        let mut k_bar = cholesky_backward(r, &r_bar);
        // the jitter scales with mean(diag K_mm)
        let (_, rel) = kmm_lower(spec, &state.z)?;
        let shift = rel * k_bar.trace() / m as f64;
        for i in 0..m {
            k_bar[(i, i)] += shift;
        }
        let extra = spec.gram_sym_grads(&state.z, &k_bar)?;
        grad_z += extra.inputs;
        for (g, e) in grad_kernel.iter_mut().zip(&extra.params) {
            *g += e;
        }
    }
    Ok(layout_gradient(&gv, &glv, &lv, &grad_z, &grad_kernel, report.grad_log_noise))
}

fn layout_gradient(
    gv: &DVector<f64>,
    glv: &DMatrix<f64>,
    lv: &DMatrix<f64>,
    grad_z: &DMatrix<f64>,
    grad_kernel: &[f64],
    grad_log_noise: Option<f64>,
) -> Vec<f64> {
    let m = gv.len();
    let mut g: Vec<f64> = gv.iter().copied().collect();
    for i in 0..m {
        for j in 0..i {
            g.push(glv[(i, j)]);
        }
        g.push(glv[(i, i)] * lv[(i, i)]);
    }
    g.extend(grad_z.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
    g.extend_from_slice(grad_kernel);
    g.extend(grad_log_noise);
    g
}

fn rows(x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)])
}

/// Held-out data for trace metrics.
#[derive(Debug, Clone, Copy)]
pub struct Holdout<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
}

/// The sparse KL bound for classification.
pub struct KlspObjective<'a> {
    pub template: KernelSpec,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub rule: GaussHermiteRule,
    pub holdout: Option<Holdout<'a>>,
    pub precond: Preconditioner,
}

impl KlspObjective<'_> {
    fn eval(&self, params: &ParamVector, x: &DMatrix<f64>, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (spec, state, _) = unpack_svgp_with(&self.template, params, &self.precond)?;
        let report = elbo_classification(&spec, &state, x, y, self.x.nrows(), &self.rule)?;
        Ok((report.elbo, pack_svgp_gradient_with(&spec, &report, &state, &self.precond)?))
    }

    fn metrics(&self, params: &ParamVector) -> Option<(f64, f64)> {
        let h = self.holdout?;
        let (spec, state, _) = unpack_svgp_with(&self.template, params, &self.precond).ok()?;
        let p = predict(&spec, &state, h.x).ok()?;
        Some(classification_metrics(p.probs.as_slice(), h.y))
    }
}

impl Objective for KlspObjective<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        self.eval(params, self.x, self.y)
    }

    fn holdout(&mut self, params: &ParamVector) -> Option<(f64, f64)> {
        self.metrics(params)
    }
}

impl StochasticObjective for KlspObjective<'_> {
    fn num_data(&self) -> usize {
        self.x.nrows()
    }

    fn evaluate_batch(&mut self, params: &ParamVector, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let y: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        self.eval(params, &rows(self.x, batch), &y)
    }

    fn holdout(&mut self, params: &ParamVector) -> Option<(f64, f64)> {
        self.metrics(params)
    }
}

/// The uncollapsed bound with a Gaussian likelihood.
pub struct GaussianObjective<'a> {
    pub template: KernelSpec,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub holdout: Option<Holdout<'a>>,
    pub precond: Preconditioner,
}

impl GaussianObjective<'_> {
    fn eval(&self, params: &ParamVector, x: &DMatrix<f64>, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (spec, state, noise) = unpack_svgp_with(&self.template, params, &self.precond)?;
        let noise = noise.ok_or_else(|| Error::InvalidConfig("Gaussian objective without a noise block".into()))?;
        let report = elbo_gaussian(&spec, &state, x, y, noise, self.x.nrows())?;
        Ok((report.elbo, pack_svgp_gradient_with(&spec, &report, &state, &self.precond)?))
    }

    fn metrics(&self, params: &ParamVector) -> Option<(f64, f64)> {
        let h = self.holdout?;
        let (spec, state, noise) = unpack_svgp_with(&self.template, params, &self.precond).ok()?;
        let p = predict(&spec, &state, h.x).ok()?;
        let var: Vec<f64> = p.variances.iter().map(|v| v + noise.map_or(0.0, |n| n.variance)).collect();
        Some(regression_metrics(p.means.as_slice(), &var, h.y))
    }
}

impl Objective for GaussianObjective<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        self.eval(params, self.x, self.y)
    }

    fn holdout(&mut self, params: &ParamVector) -> Option<(f64, f64)> {
        self.metrics(params)
    }
}

impl StochasticObjective for GaussianObjective<'_> {
    fn num_data(&self) -> usize {
        self.x.nrows()
    }

    fn evaluate_batch(&mut self, params: &ParamVector, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let y: Vec<f64> = batch.iter().map(|&i| self.y[i]).collect();
        self.eval(params, &rows(self.x, batch), &y)
    }

    fn holdout(&mut self, params: &ParamVector) -> Option<(f64, f64)> {
        self.metrics(params)
    }
}

/// Inner-loop settings for the mean-field method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tol: 1e-10,
        }
    }
}

/// Lays out `(Z, kernel)` for the mean-field method.
pub fn pack_mf(spec: &KernelSpec, z: &DMatrix<f64>) -> ParamVector {
    let mut pv = ParamVector::new();
    let flat: Vec<f64> = z.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
    pv.push_block(Block::Inducing, &flat);
    pv.push_block(Block::Kernel, &spec.to_flat());
    pv
}

pub fn unpack_mf(template: &KernelSpec, pv: &ParamVector) -> Result<(KernelSpec, DMatrix<f64>)> {
    Ok((template.with_flat(pv.block(Block::Kernel))?, unpack_z(pv, template.input_dim())?))
}

/// The mean-field bound maximized over the sites at every evaluation,
/// warm-started from the previous sites.
pub struct MfObjective<'a> {
    pub template: KernelSpec,
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub sites: DVector<f64>,
    pub inner: InnerLoopConfig,
    pub holdout: Option<Holdout<'a>>,
}

impl<'a> MfObjective<'a> {
    /// Sites start at `2y − 1`.
    pub fn new(template: KernelSpec, x: &'a DMatrix<f64>, y: &'a [f64]) -> Self {
        let sites = DVector::from_iterator(y.len(), y.iter().map(|&v| label_sign(v)));
        Self {
            template,
            x,
            y,
            sites,
            inner: InnerLoopConfig::default(),
            holdout: None,
        }
    }

    /// Sites optimized at `params`, starting from the current ones.
    pub fn fit_sites(&mut self, params: &ParamVector) -> Result<(KernelSpec, MeanFieldState)> {
        let (spec, z) = unpack_mf(&self.template, params)?;
        let start = MeanFieldState::new(z, self.sites.clone())?;
        let (state, _) = mf_inner_loop(&start, &spec, self.x, self.y, self.inner.max_iters, self.inner.tol)?;
        self.sites = state.a.clone();
        Ok((spec, state))
    }
}

impl Objective for MfObjective<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let previous = self.sites.clone();
        let fitted = self.fit_sites(params);
        let (spec, state) = match fitted {
            Ok(v) => v,
            Err(e) => {
                self.sites = previous;
                return Err(e);
            }
        };
        let report = mf_bound(&spec, &state, self.x, self.y)?;
        let mut g: Vec<f64> = report.grad_z.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        g.extend_from_slice(&report.grad_kernel);
        Ok((report.value, g))
    }

    fn holdout(&mut self, params: &ParamVector) -> Option<(f64, f64)> {
        let h = self.holdout?;
        let (spec, z) = unpack_mf(&self.template, params).ok()?;
        let state = MeanFieldState::new(z, self.sites.clone()).ok()?;
        let p = mf_predict(&spec, &state, self.x, self.y, h.x, MfPredictMode::GaussianApprox).ok()?;
        Some(classification_metrics(p.marginals.probs.as_slice(), h.y))
    }
}

fn run<O: Objective + StochasticObjective>(
    objective: &mut O,
    init: ParamVector,
    schedule: &TrainSchedule,
    clock: &mut Clock,
) -> Result<OptimizeResult> {
    match schedule.optimizer {
        OptimizerKind::Lbfgs => full_batch_optimize(objective, init, schedule, clock),
        OptimizerKind::Adadelta => adadelta_optimize(objective, init, schedule, clock),
    }
}

/// `result.params` are in whitened coordinates (see [`Preconditioner`]);
/// `spec`, `state` and `noise` are the unpacked values.
pub struct TrainedSvgp {
    pub spec: KernelSpec,
    pub state: VariationalState,
    pub noise: Option<GaussianNoise>,
    pub result: OptimizeResult,
}

pub struct TrainedMf {
    pub spec: KernelSpec,
    pub state: MeanFieldState,
    pub result: OptimizeResult,
}

/// Trains the sparse KL classifier from `(spec, state)`.
pub fn train_klsp(
    spec: &KernelSpec,
    state: &VariationalState,
    x: &DMatrix<f64>,
    y: &[f64],
    schedule: &TrainSchedule,
    clock: &mut Clock,
    holdout: Option<Holdout>,
) -> Result<TrainedSvgp> {
    let mut objective = KlspObjective {
        template: spec.clone(),
        x,
        y,
        rule: GaussHermiteRule::default(),
        holdout,
        precond: Preconditioner::whitened(),
    };
    let init = pack_svgp_with(spec, state, None, &objective.precond)?;
    let result = run(&mut objective, init, schedule, clock)?;
    let (spec, state, _) = unpack_svgp_with(spec, &result.params, &objective.precond)?;
    Ok(TrainedSvgp {
        spec,
        state,
        noise: None,
        result,
    })
}

/// Trains the uncollapsed regression model.
#[allow(clippy::too_many_arguments)]
pub fn train_gaussian(
    spec: &KernelSpec,
    state: &VariationalState,
    noise: GaussianNoise,
    x: &DMatrix<f64>,
    y: &[f64],
    schedule: &TrainSchedule,
    clock: &mut Clock,
    holdout: Option<Holdout>,
) -> Result<TrainedSvgp> {
    let mut objective = GaussianObjective {
        template: spec.clone(),
        x,
        y,
        holdout,
        precond: Preconditioner::whitened(),
    };
    let init = pack_svgp_with(spec, state, Some(noise), &objective.precond)?;
    let result = run(&mut objective, init, schedule, clock)?;
    let (spec, state, noise) = unpack_svgp_with(spec, &result.params, &objective.precond)?;
    Ok(TrainedSvgp {
        spec,
        state,
        noise,
        result,
    })
}

/// Trains the mean-field classifier: full-batch ascent over `(Z, kernel)`
/// with the sites re-optimized at every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn train_mf(
    spec: &KernelSpec,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &[f64],
    schedule: &TrainSchedule,
    inner: InnerLoopConfig,
    clock: &mut Clock,
    holdout: Option<Holdout>,
) -> Result<TrainedMf> {
    if schedule.optimizer != OptimizerKind::Lbfgs {
        return Err(Error::InvalidConfig("the mean-field method trains full-batch only".into()));
    }
    let mut objective = MfObjective::new(spec.clone(), x, y);
    objective.inner = inner;
    objective.holdout = holdout;
    let result = full_batch_optimize(&mut objective, pack_mf(spec, z), schedule, clock)?;
    let (spec, state) = objective.fit_sites(&result.params)?;
    Ok(TrainedMf { spec, state, result })
}
