//! Training and evaluation shared by the subcommands.

use serde::{Deserialize, Serialize};
use sparsegpc::data::{Dataset, Standardization};
use sparsegpc::init::{kmeans_inducing, KMeansConfig};
use sparsegpc::meanfield::MfPredictMode;
use sparsegpc::optimize::{Clock, OptimizeResult, TraceRecord, TrainSchedule};
use sparsegpc::svgp::{GaussianNoise, VariationalState};
use sparsegpc::train::{
    classification_metrics, regression_metrics, train_gaussian, train_klsp, train_mf, Holdout, InnerLoopConfig,
};

use crate::error::{CliError, CliResult};
use crate::kernel_arg::{build_kernel, KernelArg};
use crate::model::{Method, ModelFile, Posterior, TrainingMetadata, FORMAT_VERSION};

/// Number of inducing points, absolute or as a share of the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Inducing {
    Count(usize),
    Percent(f64),
}

impl Inducing {
    /// Percentages round up so that any non-empty set gets at least one point.
    pub fn resolve(self, n: usize) -> CliResult<usize> {
        match self {
            Inducing::Count(m) => Ok(m),
            Inducing::Percent(p) if p > 0.0 && p <= 100.0 => Ok(((p / 100.0) * n as f64).ceil() as usize),
            Inducing::Percent(p) => Err(CliError::Config(format!("inducing percentage {p} not in (0, 100]"))),
        }
    }

    /// Column label in the style `M=8` or `M=3.0%`.
    pub fn label(self) -> String {
        match self {
            Inducing::Count(m) => format!("M={m}"),
            Inducing::Percent(p) => format!("M={p:.1}%"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub kernel: Vec<KernelArg>,
    pub inducing: Inducing,
    pub schedule: TrainSchedule,
    pub standardize: bool,
    /// Starting noise variance for the Gaussian method.
    pub noise_variance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Klsp,
            kernel: Vec::new(),
            inducing: Inducing::Count(16),
            schedule: TrainSchedule::default(),
            standardize: true,
            noise_variance: 1.0,
        }
    }
}

pub struct Fitted {
    pub model: ModelFile,
    pub result: OptimizeResult,
}

impl Fitted {
    pub fn trace(&self) -> &[TraceRecord] {
        &self.result.trace
    }
}

/// k-means inducing points, then the selected bound under the schedule.
/// `holdout`, in raw feature units, only feeds the trace.
pub fn fit(train: &Dataset, cfg: &TrainConfig, clock: &mut Clock, holdout: Option<&Dataset>) -> CliResult<Fitted> {
    if train.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    let transform = cfg.standardize.then(|| Standardization::fit(&train.x));
    let x = match &transform {
        Some(t) => t.apply(&train.x)?,
        None => train.x.clone(),
    };
    let holdout_x = match (holdout, &transform) {
        (Some(h), Some(t)) => Some(t.apply(&h.x)?),
        (Some(h), None) => Some(h.x.clone()),
        (None, _) => None,
    };
    let holdout = holdout.zip(holdout_x.as_ref()).map(|(h, x)| Holdout { x, y: &h.y });

    let m = cfg.inducing.resolve(train.len())?;
    let z = kmeans_inducing(&x, &KMeansConfig::new(m, cfg.schedule.seed))?;
    let spec = build_kernel(&cfg.kernel, train.dim())?;
    let y = &train.y;

    let (kernel, posterior, result) = match cfg.method {
        Method::Klsp => {
            let state = VariationalState::from_prior(&spec, z)?;
            let out = train_klsp(&spec, &state, &x, y, &cfg.schedule, clock, holdout)?;
            (out.spec, Posterior::Sparse { state: out.state, noise: None }, out.result)
        }
        Method::Gaussian => {
            let state = VariationalState::from_prior(&spec, z)?;
            let noise = GaussianNoise::new(cfg.noise_variance)?;
            let out = train_gaussian(&spec, &state, noise, &x, y, &cfg.schedule, clock, holdout)?;
            (out.spec, Posterior::Sparse { state: out.state, noise: out.noise }, out.result)
        }
        Method::Mfsp => {
            let out = train_mf(&spec, &z, &x, y, &cfg.schedule, InnerLoopConfig::default(), clock, holdout)?;
            let posterior = Posterior::MeanField {
                state: out.state,
                train_x: x.clone(),
                train_y: y.clone(),
            };
            (out.spec, posterior, out.result)
        }
    };
    let initial_bound = result.trace.first().map_or(result.value, |r| r.elbo_or_bound);
    let model = ModelFile {
        format_version: FORMAT_VERSION,
        method: cfg.method,
        kernel,
        posterior,
        standardization: transform,
        metadata: TrainingMetadata {
            seed: cfg.schedule.seed,
            schedule: cfg.schedule.clone(),
            num_inducing: m,
            num_train: train.len(),
            initial_bound,
            final_bound: result.value,
            iterations: result.iterations,
            evaluations: result.evaluations,
            stop: result.stop,
        },
    };
    Ok(Fitted { model, result })
}

/// Holdout quality of a trained model on labelled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutMetrics {
    pub method: Method,
    pub n: usize,
    /// Mean negative log predictive probability (density for regression).
    pub nlp: f64,
    /// Error rate for classifiers, mean squared error for regression.
    pub error: f64,
}

pub fn evaluate(model: &ModelFile, data: &Dataset, mf_mode: MfPredictMode) -> CliResult<HoldoutMetrics> {
    let p = model.predict(&data.x, mf_mode)?;
    let (nlp, error) = match (&p.prob_class1, &p.predictive_var) {
        (Some(prob), _) => classification_metrics(prob.as_slice(), &data.y),
        (None, Some(var)) => regression_metrics(p.latent_mean.as_slice(), var.as_slice(), &data.y),
        (None, None) => unreachable!("predictions carry probabilities or variances"),
    };
    Ok(HoldoutMetrics {
        method: model.method,
        n: data.len(),
        nlp,
        error,
    })
}
