//! Cross-validated benchmark runs and their Table-1-style summary.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sparsegpc::data::{make_folds, Dataset, FoldPlan};
use sparsegpc::meanfield::MfPredictMode;
use sparsegpc::optimize::write_trace;

use crate::error::CliResult;
use crate::model::Method;
use crate::pipeline::{evaluate, fit, TrainConfig};
use crate::ClockKind;

/// Mean holdout NLP above which a fold counts as "Large".
pub const LARGE_NLP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldStatus {
    Ok,
    Large,
    Failed,
}

impl FoldStatus {
    fn name(self) -> &'static str {
        match self {
            FoldStatus::Ok => "ok",
            FoldStatus::Large => "large",
            FoldStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub method: Method,
    pub inducing: String,
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub num_inducing: usize,
    pub nlp: Option<f64>,
    pub error: Option<f64>,
    pub seconds: f64,
    pub status: FoldStatus,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: Method,
    pub inducing: String,
    pub median_nlp: f64,
    pub nlp_2se: f64,
    pub median_error: f64,
    pub error_2se: f64,
    pub folds_ok: usize,
    pub folds_large: usize,
    pub folds_failed: usize,
    pub total_seconds: f64,
    /// `median±2se`, or `Large` when the median NLP is above [`LARGE_NLP`].
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dataset_name: String,
    pub methods: Vec<Method>,
    pub folds: usize,
    /// Seeds the fold split; fold `k` trains with schedule seed `seed + k`.
    pub seed: u64,
    pub train: TrainConfig,
    pub mf_mode: MfPredictMode,
    pub clock: ClockKind,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Twice the standard error of `values` measured about their median,
/// `2 sqrt(Σ (v − med)² / (n (n − 1)))`; zero for a single value.
pub fn two_se_about_median(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return if n == 1 { 0.0 } else { f64::NAN };
    }
    let med = median(values);
    let ss: f64 = values.iter().map(|v| (v - med) * (v - med)).sum();
    2.0 * (ss / (n * (n - 1)) as f64).sqrt()
}

/// Runs every method on every fold. A fold that fails is recorded and the
/// run moves on. Traces go to `out_dir/traces/<method>_fold<k>.jsonl`.
pub fn run_benchmark(data: &Dataset, cfg: &BenchConfig, out_dir: Option<&Path>) -> CliResult<(FoldPlan, MetricsReport)> {
    let plan = make_folds(data.len(), cfg.folds, cfg.seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("traces"))?;
    }
    let mut folds = Vec::new();
    for &method in &cfg.methods {
        for k in 0..plan.n_folds {
            let train = data.subset(&plan.train_indices(k));
            let test = data.subset(&plan.test_indices(k));
            let mut tc = cfg.train.clone();
            tc.method = method;
            tc.schedule.seed = cfg.seed.wrapping_add(k as u64);
            let start = Instant::now();
            let mut clock = cfg.clock.start();
            let outcome = fit(&train, &tc, &mut clock, Some(&test))
                .and_then(|f| evaluate(&f.model, &test, cfg.mf_mode).map(|m| (f, m)));
            let seconds = start.elapsed().as_secs_f64();
            let mut row = FoldResult {
                method,
                inducing: tc.inducing.label(),
                fold: k,
                n_train: train.len(),
                n_test: test.len(),
                num_inducing: tc.inducing.resolve(train.len()).unwrap_or(0),
                nlp: None,
                error: None,
                seconds,
                status: FoldStatus::Failed,
                message: None,
            };
            match outcome {
                Ok((fitted, metrics)) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join("traces").join(format!("{}_fold{k}.jsonl", method.name()));
                        let mut f = fs::File::create(path)?;
                        write_trace(fitted.trace(), &mut f)?;
                    }
                    row.nlp = Some(metrics.nlp);
                    row.error = Some(metrics.error);
                    row.status = if metrics.nlp.is_finite() && metrics.nlp <= LARGE_NLP {
                        FoldStatus::Ok
                    } else {
                        FoldStatus::Large
                    };
                }
                Err(e) => row.message = Some(e.to_string()),
            }
            eprintln!(
                "{} fold {k}: {} nlp={} error={} ({seconds:.2}s)",
                method.name(),
                row.status.name(),
                fmt_opt(row.nlp),
                fmt_opt(row.error)
            );
            folds.push(row);
        }
    }
    let summary = cfg.methods.iter().map(|&m| summarize(&cfg.dataset_name, m, &folds)).collect();
    let report = MetricsReport { folds, summary };
    if let Some(dir) = out_dir {
        write_folds_csv(&report.folds, &mut fs::File::create(dir.join("folds.csv"))?)?;
        write_summary_csv(&report.summary, &mut fs::File::create(dir.join("summary.csv"))?)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(dir.join("report.json"), json + "\n")?;
        let plan_json = serde_json::to_string(&plan).expect("fold plan serializes");
        fs::write(dir.join("fold_plan.json"), plan_json + "\n")?;
    }
    Ok((plan, report))
}

pub fn summarize(dataset: &str, method: Method, folds: &[FoldResult]) -> SummaryRow {
    let rows: Vec<&FoldResult> = folds.iter().filter(|f| f.method == method).collect();
    let done: Vec<&FoldResult> = rows.iter().copied().filter(|f| f.status != FoldStatus::Failed).collect();
    let nlp: Vec<f64> = done.iter().filter_map(|f| f.nlp).collect();
    let err: Vec<f64> = done.iter().filter_map(|f| f.error).collect();
    let count = |s| rows.iter().filter(|f| f.status == s).count();
    let median_nlp = median(&nlp);
    let nlp_2se = two_se_about_median(&nlp);
    let display = if done.is_empty() {
        "failed".to_string()
    } else if median_nlp > LARGE_NLP || !median_nlp.is_finite() {
        "Large".to_string()
    } else {
        format!("{median_nlp:.2}±{nlp_2se:.2}")
    };
    SummaryRow {
        dataset: dataset.to_string(),
        method,
        inducing: rows.first().map(|f| f.inducing.clone()).unwrap_or_default(),
        median_nlp,
        nlp_2se,
        median_error: median(&err),
        error_2se: two_se_about_median(&err),
        folds_ok: count(FoldStatus::Ok),
        folds_large: count(FoldStatus::Large),
        folds_failed: count(FoldStatus::Failed),
        total_seconds: rows.iter().map(|f| f.seconds).sum(),
        display,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_folds_csv(rows: &[FoldResult], out: &mut impl Write) -> CliResult<()> {
    writeln!(out, "method,inducing,fold,n_train,n_test,num_inducing,nlp,error,seconds,status,message")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method.name(),
            csv_field(&r.inducing),
            r.fold,
            r.n_train,
            r.n_test,
            r.num_inducing,
            fmt_opt(r.nlp),
            fmt_opt(r.error),
            r.seconds,
            r.status.name(),
            csv_field(r.message.as_deref().unwrap_or(""))
        )?;
    }
    Ok(())
}

pub fn write_summary_csv(rows: &[SummaryRow], out: &mut impl Write) -> CliResult<()> {
    writeln!(
        out,
        "dataset,method,inducing,median_nlp,nlp_2se,median_error,error_2se,folds_ok,folds_large,folds_failed,total_seconds,display"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.dataset),
            r.method.name(),
            csv_field(&r.inducing),
            r.median_nlp,
            r.nlp_2se,
            r.median_error,
            r.error_2se,
            r.folds_ok,
            r.folds_large,
            r.folds_failed,
            r.total_seconds,
            csv_field(&r.display)
        )?;
    }
    Ok(())
}
