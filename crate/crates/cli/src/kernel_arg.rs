use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sparsegpc::kernels::{Family, KernelSpec, KernelTerm};

use crate::error::{CliError, CliResult};

/// One `--kernel` value: `family[:variance[:lengthscale]]`, where the
/// lengthscale is either one number shared by every input or a
/// comma-separated list with one entry per input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelArg {
    pub family: Family,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl Default for KernelArg {
    fn default() -> Self {
        Self {
            family: Family::Rbf,
            variance: 1.0,
            lengthscales: vec![1.0],
        }
    }
}

impl FromStr for KernelArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.split(':');
        let family: Family = parts
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|e: sparsegpc::Error| e.to_string())?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number in kernel `{s}`"));
        let variance = parts.next().map(num).transpose()?.unwrap_or(1.0);
        let lengthscales = match parts.next() {
            Some(ls) => ls.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
            None => vec![1.0],
        };
        if parts.next().is_some() {
            return Err(format!("kernel `{s}` has too many fields"));
        }
        Ok(Self {
            family,
            variance,
            lengthscales,
        })
    }
}

impl KernelArg {
    fn term(&self, dim: usize) -> CliResult<KernelTerm> {
        let ls = match self.lengthscales.len() {
            1 => vec![self.lengthscales[0]; dim],
            n if n == dim => self.lengthscales.clone(),
            n => {
                return Err(CliError::Config(format!(
                    "kernel gives {n} lengthscales but the data has {dim} features"
                )))
            }
        };
        Ok(KernelTerm::new(self.family, self.variance, ls))
    }
}

/// Sum kernel over `dim` inputs; an empty list means a unit RBF.
pub fn build_kernel(args: &[KernelArg], dim: usize) -> CliResult<KernelSpec> {
    let default = [KernelArg::default()];
    let args = if args.is_empty() { &default[..] } else { args };
    let terms = args.iter().map(|a| a.term(dim)).collect::<CliResult<Vec<_>>>()?;
    Ok(KernelSpec::new(terms)?)
}
