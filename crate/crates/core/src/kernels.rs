//! Covariance functions with ARD lengthscales.
//!
//! A [`KernelSpec`] is a sum of [`KernelTerm`]s. Every positive hyperparameter
//! is exposed to optimizers on the log scale; the flat layout is, per term in
//! order, `[log variance, log lengthscale_1, …, log lengthscale_D]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Rbf,
    Matern32,
    Linear,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" | "se" => Ok(Family::Rbf),
            "matern32" | "matern" => Ok(Family::Matern32),
            "linear" => Ok(Family::Linear),
            other => Err(Error::InvalidConfig(format!("unknown kernel family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTerm {
    pub family: Family,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelTerm {
    pub fn new(family: Family, variance: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family,
            variance,
            lengthscales,
        }
    }

    /// Same lengthscale in every input dimension.
    pub fn isotropic(family: Family, variance: f64, lengthscale: f64, dim: usize) -> Self {
        Self::new(family, variance, vec![lengthscale; dim])
    }

    fn num_params(&self) -> usize {
        1 + self.lengthscales.len()
    }

    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let v = self.variance;
        match self.family {
            Family::Rbf => {
                let r2 = scaled_sq_dist(x, y, &self.lengthscales);
                v * (-0.5 * r2).exp()
            }
            Family::Matern32 => {
                let r = scaled_sq_dist(x, y, &self.lengthscales).sqrt();
                v * (1.0 + SQRT3 * r) * (-SQRT3 * r).exp()
            }
            Family::Linear => {
                v * x
                    .iter()
                    .zip(y)
                    .zip(&self.lengthscales)
                    .map(|((a, b), l)| a * b / (l * l))
                    .sum::<f64>()
            }
        }
    }

    fn eval_diag(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Rbf | Family::Matern32 => self.variance,
            Family::Linear => self.eval(x, x),
        }
    }

    /// Accumulates `up·∂k(x,y)/∂θ` into `g_params` (log scale) and
    /// `up·∂k(x,y)/∂x` into `g_x`.
    fn accumulate(&self, x: &[f64], y: &[f64], up: f64, g_params: &mut [f64], g_x: &mut [f64]) {
        let v = self.variance;
        let ls = &self.lengthscales;
        match self.family {
            Family::Rbf => {
                let r2 = scaled_sq_dist(x, y, ls);
                let k = v * (-0.5 * r2).exp();
                g_params[0] += up * k;
                for d in 0..ls.len() {
                    let u = (x[d] - y[d]) / ls[d];
                    g_params[1 + d] += up * k * u * u;
                    g_x[d] -= up * k * u / ls[d];
                }
            }
            Family::Matern32 => {
                let r = scaled_sq_dist(x, y, ls).sqrt();
                let e = (-SQRT3 * r).exp();
                g_params[0] += up * v * (1.0 + SQRT3 * r) * e;
                for d in 0..ls.len() {
                    let u = (x[d] - y[d]) / ls[d];
                    g_params[1 + d] += up * 3.0 * v * e * u * u;
                    // vanishes at r = 0, which is the limit of the derivative
                    g_x[d] -= up * 3.0 * v * e * u / ls[d];
                }
            }
            Family::Linear => {
                let mut k = 0.0;
                for d in 0..ls.len() {
                    let w = 1.0 / (ls[d] * ls[d]);
                    k += x[d] * y[d] * w;
                    g_params[1 + d] -= up * 2.0 * v * x[d] * y[d] * w;
                    g_x[d] += up * v * y[d] * w;
                }
                g_params[0] += up * v * k;
            }
        }
    }

    fn accumulate_diag(&self, x: &[f64], up: f64, g_params: &mut [f64], g_x: &mut [f64]) {
        match self.family {
            Family::Rbf | Family::Matern32 => g_params[0] += up * self.variance,
            Family::Linear => {
                // both arguments move together on the diagonal
                let before: Vec<f64> = g_x.to_vec();
                self.accumulate(x, x, up, g_params, g_x);
                for d in 0..g_x.len() {
                    g_x[d] = before[d] + 2.0 * (g_x[d] - before[d]);
                }
            }
        }
    }
}

fn scaled_sq_dist(x: &[f64], y: &[f64], ls: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(ls)
        .map(|((a, b), l)| {
            let u = (a - b) / l;
            u * u
        })
        .sum()
}

/// Gradients of `⟨upstream, K(A, B)⟩`.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    /// With respect to the flat log-hyperparameters.
    pub params: Vec<f64>,
    /// With respect to the rows of `A`.
    pub inputs: DMatrix<f64>,
}

/// Sum of covariance terms sharing one input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<KernelTerm>", into = "Vec<KernelTerm>")]
pub struct KernelSpec {
    terms: Vec<KernelTerm>,
}

impl TryFrom<Vec<KernelTerm>> for KernelSpec {
    type Error = Error;

    fn try_from(terms: Vec<KernelTerm>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<KernelSpec> for Vec<KernelTerm> {
    fn from(spec: KernelSpec) -> Self {
        spec.terms
    }
}

impl KernelSpec {
    pub fn new(terms: Vec<KernelTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidConfig("kernel needs at least one term".into()));
        }
        let dim = terms[0].lengthscales.len();
        for (i, t) in terms.iter().enumerate() {
            dim_check(t.lengthscales.len() == dim, || {
                format!(
                    "kernel term {i} has {} lengthscales, expected {dim}",
                    t.lengthscales.len()
                )
            })?;
            if !(t.variance > 0.0 && t.variance.is_finite()) {
                return Err(Error::NonPositiveHyperparameter(format!(
                    "term {i} variance {}",
                    t.variance
                )));
            }
            if let Some(l) = t.lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
                return Err(Error::NonPositiveHyperparameter(format!(
                    "term {i} lengthscale {l}"
                )));
            }
        }
        Ok(Self { terms })
    }

    pub fn single(term: KernelTerm) -> Result<Self> {
        Self::new(vec![term])
    }

    /// Isotropic RBF with unit variance and lengthscale.
    pub fn rbf(dim: usize) -> Self {
        Self::new(vec![KernelTerm::isotropic(Family::Rbf, 1.0, 1.0, dim)])
            .expect("default kernel is valid")
    }

    pub fn terms(&self) -> &[KernelTerm] {
        &self.terms
    }

    pub fn input_dim(&self) -> usize {
        self.terms[0].lengthscales.len()
    }

    pub fn num_params(&self) -> usize {
        self.terms.iter().map(KernelTerm::num_params).sum()
    }

    /// Flat unconstrained parameters (log of every positive).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.terms {
            out.push(t.variance.ln());
            out.extend(t.lengthscales.iter().map(|l| l.ln()));
        }
        out
    }

    /// Same structure with hyperparameters taken from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        dim_check(flat.len() == self.num_params(), || {
            format!(
                "flat kernel vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )
        })?;
        let mut it = flat.iter().map(|v| v.exp());
        let terms = self
            .terms
            .iter()
            .map(|t| KernelTerm {
                family: t.family,
                variance: it.next().unwrap(),
                lengthscales: (0..t.lengthscales.len()).map(|_| it.next().unwrap()).collect(),
            })
            .collect();
        Self::new(terms)
    }

    fn check_inputs(&self, a: &DMatrix<f64>) -> Result<()> {
        dim_check(a.ncols() == self.input_dim(), || {
            format!(
                "inputs have {} columns, kernel expects {}",
                a.ncols(),
                self.input_dim()
            )
        })
    }

    /// Cross-covariance `K(A, B)`.
    pub fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(a)?;
        self.check_inputs(b)?;
        let ar = rows(a);
        let br = rows(b);
        Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
            self.terms.iter().map(|t| t.eval(&ar[i], &br[j])).sum()
        }))
    }

    /// `K(A, A)`, symmetric by construction.
    pub fn gram_sym(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(a)?;
        let ar = rows(a);
        let n = a.nrows();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v: f64 = self.terms.iter().map(|t| t.eval(&ar[i], &ar[j])).sum();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }

    /// Diagonal of `K(A, A)` without forming the matrix.
    pub fn gram_diag(&self, a: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_inputs(a)?;
        let ar = rows(a);
        Ok(DVector::from_fn(a.nrows(), |i, _| {
            self.terms.iter().map(|t| t.eval_diag(&ar[i])).sum()
        }))
    }

    /// Gradients of `Σᵢⱼ upstream[i,j]·K(A,B)[i,j]` with respect to the
    /// log-hyperparameters and the rows of `A`.
    pub fn gram_grads(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<KernelGrads> {
        self.check_inputs(a)?;
        self.check_inputs(b)?;
        dim_check(upstream.shape() == (a.nrows(), b.nrows()), || {
            format!(
                "upstream is {:?}, expected ({}, {})",
                upstream.shape(),
                a.nrows(),
                b.nrows()
            )
        })?;
        let ar = rows(a);
        let br = rows(b);
        let dim = self.input_dim();
        let mut params = vec![0.0; self.num_params()];
        let mut inputs = DMatrix::zeros(a.nrows(), dim);
        let mut gx = vec![0.0; dim];
        for i in 0..a.nrows() {
            gx.iter_mut().for_each(|g| *g = 0.0);
            for j in 0..b.nrows() {
                let up = upstream[(i, j)];
                if up == 0.0 {
                    continue;
                }
                let mut offset = 0;
                for t in &self.terms {
                    let np = t.num_params();
                    t.accumulate(&ar[i], &br[j], up, &mut params[offset..offset + np], &mut gx);
                    offset += np;
                }
            }
            for d in 0..dim {
                inputs[(i, d)] = gx[d];
            }
        }
        Ok(KernelGrads { params, inputs })
    }

    /// Gradients of `Σᵢ upstream[i]·k(aᵢ, aᵢ)`.
    pub fn gram_diag_grads(&self, a: &DMatrix<f64>, upstream: &DVector<f64>) -> Result<KernelGrads> {
        self.check_inputs(a)?;
        dim_check(upstream.len() == a.nrows(), || {
            format!("upstream has {} entries, expected {}", upstream.len(), a.nrows())
        })?;
        let ar = rows(a);
        let dim = self.input_dim();
        let mut params = vec![0.0; self.num_params()];
        let mut inputs = DMatrix::zeros(a.nrows(), dim);
        let mut gx = vec![0.0; dim];
        for i in 0..a.nrows() {
            gx.iter_mut().for_each(|g| *g = 0.0);
            let mut offset = 0;
            for t in &self.terms {
                let np = t.num_params();
                t.accumulate_diag(&ar[i], upstream[i], &mut params[offset..offset + np], &mut gx);
                offset += np;
            }
            for d in 0..dim {
                inputs[(i, d)] = gx[d];
            }
        }
        Ok(KernelGrads { params, inputs })
    }

    /// Gradients of `⟨upstream, K(Z, Z)⟩` where both arguments move with `Z`.
    pub fn gram_sym_grads(&self, z: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<KernelGrads> {
        let sym = (upstream + upstream.transpose()) * 0.5;
        let mut g = self.gram_grads(z, z, &sym)?;
        // the second argument contributes the same as the first for a symmetric upstream
        g.inputs *= 2.0;
        Ok(g)
    }
}

pub(crate) fn rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows())
        .map(|i| a.row(i).iter().copied().collect())
        .collect()
}
