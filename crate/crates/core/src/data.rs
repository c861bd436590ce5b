//! Datasets: CSV loading, standardization, folds and synthetic problems.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which CSV column holds the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    /// `last`, a zero-based index, or a header name.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(if s.eq_ignore_ascii_case("last") {
            LabelColumn::Last
        } else if let Ok(i) = s.parse() {
            LabelColumn::Index(i)
        } else {
            LabelColumn::Name(s.to_string())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

/// Per-feature affine map `x ↦ (x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Mean and 1/N standard deviation; constant features get scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            mean.push(mu);
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j]))
    }

    pub fn invert(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.scale[j] + self.mean[j]))
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "transform has {} features, data has {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    /// `{0, 1}` for classification, real values for regression.
    pub y: Vec<f64>,
    pub feature_names: Option<Vec<String>>,
    /// Set when `x` has been standardized.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(Self {
            x,
            y,
            feature_names: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(idx.len(), self.dim(), |i, j| self.x[(idx[i], j)]);
        Dataset {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

/// Standardizes the features and records the transform.
pub fn standardize(ds: &Dataset) -> Dataset {
    let t = Standardization::fit(&ds.x);
    Dataset {
        x: t.apply(&ds.x).expect("transform fitted to these columns"),
        y: ds.y.clone(),
        feature_names: ds.feature_names.clone(),
        standardization: Some(t),
    }
}

struct RawTable {
    header: Option<Vec<String>>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path, has_header: bool) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(e, 0))?;
    let header = if has_header {
        let h = reader.headers().map_err(|e| csv_error(e, 1))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(RawTable { header, rows })
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: line as usize,
            msg: format!("{other:?}"),
        },
    }
}

fn parse_number(s: &str, line: u64, col: usize) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line: line as usize,
        msg: format!("column {col}: '{s}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line: line as usize,
            msg: format!("column {col}: non-finite value '{s}'"),
        });
    }
    Ok(v)
}

fn resolve_column(label: &LabelColumn, header: Option<&[String]>, width: usize) -> Result<usize> {
    let idx = match label {
        LabelColumn::Last => width.checked_sub(1),
        LabelColumn::Index(i) => Some(*i),
        LabelColumn::Name(name) => {
            let header = header.ok_or_else(|| {
                Error::InvalidConfig(format!("label column '{name}' given by name but the file has no header"))
            })?;
            header.iter().position(|h| h == name)
        }
    };
    match idx {
        Some(i) if i < width => Ok(i),
        _ => Err(Error::InvalidConfig(format!("label column {label:?} not found among {width} columns"))),
    }
}

/// Maps `{0, 1}` or `{−1, +1}` labels to `{0, 1}`.
pub fn map_labels(raw: &[f64]) -> Result<Vec<f64>> {
    let zero_one = raw.iter().all(|&v| v == 0.0 || v == 1.0);
    if zero_one {
        return Ok(raw.to_vec());
    }
    let signed = raw.iter().all(|&v| v == -1.0 || v == 1.0);
    if signed {
        return Ok(raw.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect());
    }
    let mut bad: Vec<String> = Vec::new();
    for v in raw {
        if *v != 0.0 && *v != 1.0 && *v != -1.0 {
            let s = v.to_string();
            if !bad.contains(&s) {
                bad.push(s);
            }
        }
    }
    if bad.is_empty() {
        bad.push("labels mix 0 and -1".into());
    }
    Err(Error::Label(bad))
}

/// Loads a CSV file; rows keep their order.
pub fn load_csv_task(path: &Path, label: &LabelColumn, has_header: bool, task: Task) -> Result<Dataset> {
    let table = read_table(path, has_header)?;
    let width = match (&table.header, table.rows.first()) {
        (Some(h), _) => h.len(),
        (None, Some((_, r))) => r.len(),
        (None, None) => 0,
    };
    if table.rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "no data rows".into(),
        });
    }
    let label_idx = resolve_column(label, table.header.as_deref(), width)?;
    let d = width - 1;
    let mut xs = Vec::with_capacity(table.rows.len() * d);
    let mut ys = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        if row.len() != width {
            return Err(Error::Parse {
                line: *line as usize,
                msg: format!("expected {width} fields, found {}", row.len()),
            });
        }
        for (j, field) in row.iter().enumerate() {
            let v = parse_number(field, *line, j)?;
            if j == label_idx {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let y = match task {
        Task::Classification => map_labels(&ys)?,
        Task::Regression => ys,
    };
    let mut ds = Dataset::new(DMatrix::from_row_slice(y.len(), d, &xs), y)?;
    ds.feature_names = table
        .header
        .map(|h| h.into_iter().enumerate().filter(|(j, _)| *j != label_idx).map(|(_, s)| s).collect());
    Ok(ds)
}

/// Classification CSV.
pub fn load_csv(path: &Path, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    load_csv_task(path, label, has_header, Task::Classification)
}

/// Feature-only CSV; an empty file gives zero rows of width `dim`.
pub fn load_features_csv(path: &Path, has_header: bool, drop: Option<&LabelColumn>, dim: usize) -> Result<DMatrix<f64>> {
    let table = read_table(path, has_header)?;
    let width = match (&table.header, table.rows.first()) {
        (Some(h), _) => h.len(),
        (None, Some((_, r))) => r.len(),
        (None, None) => return Ok(DMatrix::zeros(0, dim)),
    };
    if table.rows.is_empty() {
        return Ok(DMatrix::zeros(0, dim));
    }
    let skip = drop.map(|l| resolve_column(l, table.header.as_deref(), width)).transpose()?;
    let d = width - usize::from(skip.is_some());
    if d != dim {
        return Err(Error::DimensionMismatch(format!("model expects {dim} features, file has {d}")));
    }
    let mut xs = Vec::with_capacity(table.rows.len() * d);
    for (line, row) in &table.rows {
        if row.len() != width {
            return Err(Error::Parse {
                line: *line as usize,
                msg: format!("expected {width} fields, found {}", row.len()),
            });
        }
        for (j, field) in row.iter().enumerate() {
            if Some(j) != skip {
                xs.push(parse_number(field, *line, j)?);
            }
        }
    }
    Ok(DMatrix::from_row_slice(table.rows.len(), d, &xs))
}

/// Writes features then the label as the last column, with a header.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(e, 0))?;
    let mut header: Vec<String> = match &ds.feature_names {
        Some(n) => n.clone(),
        None => (0..ds.dim()).map(|j| format!("x{j}")).collect(),
    };
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(e, 0))?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", ds.y[i]));
        w.write_record(&rec).map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

/// Fold ids for cross-validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// Seeded shuffle dealt round-robin into `n_folds` folds.
pub fn make_folds(n: usize, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds == 0 || n_folds > n {
        return Err(Error::InvalidConfig(format!("{n_folds} folds for {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % n_folds;
    }
    Ok(FoldPlan {
        n_folds,
        assignments,
        seed,
    })
}

/// Two interleaved crescents with isotropic Gaussian noise of standard
/// deviation `noise`. Class 1 is the upper arc `(cos t, sin t)`, class 0 the
/// lower arc `(1 − cos t, ½ − sin t)`, `t ∈ [0, π]`, both centred afterwards.
pub fn synth_banana(n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidConfig(format!("banana with {n_per_class} points per class, noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(4 * n_per_class);
    let mut ys = Vec::with_capacity(2 * n_per_class);
    for i in 0..n_per_class {
        let t = std::f64::consts::PI * (i as f64 + 0.5) / n_per_class as f64;
        for (label, (px, py)) in [(1.0, (t.cos(), t.sin())), (0.0, (1.0 - t.cos(), 0.5 - t.sin()))] {
            let ex: f64 = StandardNormal.sample(&mut rng);
            let ey: f64 = StandardNormal.sample(&mut rng);
            xs.extend([px - 0.5 + noise * ex, py - 0.25 + noise * ey]);
            ys.push(label);
        }
    }
    let mut ds = Dataset::new(DMatrix::from_row_slice(ys.len(), 2, &xs), ys)?;
    ds.feature_names = Some(vec!["x0".into(), "x1".into()]);
    Ok(ds)
}

/// Two Gaussian clouds in `dim` dimensions with unit covariance and
/// centres `±separation/2` along the first axis.
pub fn synth_two_clusters(n_per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || dim == 0 {
        return Err(Error::InvalidConfig("two clusters need points and dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(2 * n_per_class * dim);
    let mut ys = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for (label, centre) in [(1.0, 0.5 * separation), (0.0, -0.5 * separation)] {
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                xs.push(if j == 0 { centre + e } else { e });
            }
            ys.push(label);
        }
    }
    Dataset::new(DMatrix::from_row_slice(ys.len(), dim, &xs), ys)
}
