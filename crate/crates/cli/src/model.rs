//! The on-disk model: one pretty-printed JSON document.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "method": "klsp" | "mfsp" | "gaussian",
//!   "kernel": [{"family": "rbf", "variance": .., "lengthscales": [..]}, ..],
//!   "posterior": {"kind": "sparse", "state": {z, m, l}, "noise": null | {variance}}
//!              | {"kind": "mean_field", "state": {z, a, precisions}, "train_x": .., "train_y": [..]},
//!   "standardization": null | {"mean": [..], "scale": [..]},
//!   "metadata": {seed, schedule, num_inducing, num_train, initial_bound, final_bound, ..}
//! }
//! ```
//!
//! Matrices use nalgebra's serde layout (column-major data followed by the
//! shape). Floats are written with round-trip precision, so a reloaded model
//! predicts bit for bit like the one that was saved.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sparsegpc::data::Standardization;
use sparsegpc::kernels::KernelSpec;
use sparsegpc::meanfield::{mf_predict, MeanFieldState, MfPredictMode};
use sparsegpc::optimize::{StopReason, TrainSchedule};
use sparsegpc::svgp::{predict, GaussianNoise, VariationalState};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Sparse KL bound with a probit likelihood.
    Klsp,
    /// Mean-field bound with truncated-Gaussian sites.
    Mfsp,
    /// Sparse Gaussian-likelihood regression.
    Gaussian,
}

impl Method {
    pub fn is_classifier(self) -> bool {
        self != Method::Gaussian
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Klsp => "klsp",
            Method::Mfsp => "mfsp",
            Method::Gaussian => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Posterior {
    Sparse {
        state: VariationalState,
        noise: Option<GaussianNoise>,
    },
    /// Mean-field predictions need the (standardized) training inputs.
    MeanField {
        state: MeanFieldState,
        train_x: DMatrix<f64>,
        train_y: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub schedule: TrainSchedule,
    pub num_inducing: usize,
    pub num_train: usize,
    pub initial_bound: f64,
    pub final_bound: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub method: Method,
    pub kernel: KernelSpec,
    pub posterior: Posterior,
    pub standardization: Option<Standardization>,
    pub metadata: TrainingMetadata,
}

/// Per-point predictions in the latent space, plus class probabilities for
/// classifiers or the noisy predictive variance for regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub latent_mean: DVector<f64>,
    pub latent_var: DVector<f64>,
    pub prob_class1: Option<DVector<f64>>,
    pub predictive_var: Option<DVector<f64>>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.latent_mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latent_mean.is_empty()
    }
}

/// Ties at exactly one half go to class 1.
pub fn predicted_label(prob: f64) -> u8 {
    u8::from(prob >= 0.5)
}

impl ModelFile {
    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| CliError::Numerical(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> CliResult<Self> {
        let probe: serde_json::Value = serde_json::from_str(s).map_err(|e| CliError::Data(format!("model file: {e}")))?;
        match probe.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(CliError::Data(format!("unsupported model format version {v}"))),
            None => return Err(CliError::Data("model file has no format_version".into())),
        }
        let model: ModelFile = serde_json::from_str(s).map_err(|e| CliError::Data(format!("model file: {e}")))?;
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    fn check(&self) -> CliResult<()> {
        let d = self.input_dim();
        if let Some(t) = &self.standardization {
            if t.dim() != d {
                return Err(CliError::Data(format!("standardization has {} features, kernel {d}", t.dim())));
            }
        }
        let z_cols = match &self.posterior {
            Posterior::Sparse { state, .. } => {
                state.validate()?;
                state.z.ncols()
            }
            Posterior::MeanField { state, train_x, train_y } => {
                state.validate()?;
                if train_x.nrows() != train_y.len() || train_x.ncols() != d {
                    return Err(CliError::Data("embedded training data has the wrong shape".into()));
                }
                state.z.ncols()
            }
        };
        if z_cols != d {
            return Err(CliError::Data(format!("inducing inputs have {z_cols} columns, kernel {d}")));
        }
        Ok(())
    }

    /// Predictions at raw (unstandardized) inputs.
    pub fn predict(&self, x_raw: &DMatrix<f64>, mf_mode: MfPredictMode) -> CliResult<Predictions> {
        if x_raw.ncols() != self.input_dim() {
            return Err(CliError::Data(format!(
                "model expects {} features, data has {}",
                self.input_dim(),
                x_raw.ncols()
            )));
        }
        let x = match &self.standardization {
            Some(t) => t.apply(x_raw)?,
            None => x_raw.clone(),
        };
        if x.nrows() == 0 {
            let empty = DVector::zeros(0);
            return Ok(Predictions {
                latent_mean: empty.clone(),
                latent_var: empty.clone(),
                prob_class1: self.method.is_classifier().then(|| empty.clone()),
                predictive_var: (!self.method.is_classifier()).then_some(empty),
            });
        }
        let marginals = match &self.posterior {
            Posterior::Sparse { state, .. } => predict(&self.kernel, state, &x)?,
            Posterior::MeanField { state, train_x, train_y } => {
                mf_predict(&self.kernel, state, train_x, train_y, &x, mf_mode)?.marginals
            }
        };
        let (prob_class1, predictive_var) = match &self.posterior {
            Posterior::Sparse { noise: Some(noise), .. } => {
                (None, Some(marginals.variances.map(|v| v + noise.variance)))
            }
            _ => (Some(marginals.probs), None),
        };
        Ok(Predictions {
            latent_mean: marginals.means,
            latent_var: marginals.variances,
            prob_class1,
            predictive_var,
        })
    }
}

/// Classifiers: `latent_mean,latent_var,prob_class1,predicted_label`.
/// Regression: `latent_mean,latent_var,predictive_var`.
pub fn write_predictions(p: &Predictions, out: &mut impl Write) -> CliResult<()> {
    if let Some(prob) = &p.prob_class1 {
        writeln!(out, "latent_mean,latent_var,prob_class1,predicted_label")?;
        for i in 0..p.len() {
            writeln!(
                out,
                "{},{},{},{}",
                p.latent_mean[i],
                p.latent_var[i],
                prob[i],
                predicted_label(prob[i])
            )?;
        }
    } else {
        let pv = p.predictive_var.as_ref().expect("regression predictions carry a predictive variance");
        writeln!(out, "latent_mean,latent_var,predictive_var")?;
        for i in 0..p.len() {
            writeln!(out, "{},{},{}", p.latent_mean[i], p.latent_var[i], pv[i])?;
        }
    }
    Ok(())
}
