//! Benchmark suites: Friedman regression and the logistic classification
//! problem, each run at several worker counts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::data::{gen_friedman, gen_logistic_binary, logistic_grid, Dataset};
use crate::error::{invalid, Result, SbartError};
use crate::metrics::{compute_auc, confusion_matrix, mean_abs_error, rmse, MetricsReport};
use crate::problem::{Mode, Problem};
use crate::runtime::{train, RunOutput, TrainOptions, TransportKind};
use crate::sampler::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Friedman,
    Logistic,
}

impl std::str::FromStr for Suite {
    type Err = SbartError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "friedman" => Ok(Suite::Friedman),
            "logistic" => Ok(Suite::Logistic),
            other => invalid(format!("unknown suite '{other}' (expected friedman or logistic)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub suites: Vec<Suite>,
    pub n: usize,
    pub n_test: usize,
    /// Covariate count; the Friedman suite needs at least five.
    pub p: usize,
    pub noise_sd: f64,
    pub workers: Vec<usize>,
    pub transport: TransportKind,
    /// Points on the x1 grid of the logistic curve.
    pub grid_points: usize,
    pub data_seed: u64,
    /// Sampler settings; the mode is set per suite.
    pub config: SamplerConfig,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            suites: vec![Suite::Friedman, Suite::Logistic],
            n: 20_000,
            n_test: 1_000,
            p: 40,
            noise_sd: 1.0,
            workers: vec![1, 2],
            transport: TransportKind::InProc,
            grid_points: 201,
            data_seed: 2024,
            config: SamplerConfig::default(),
        }
    }
}

/// One row of the plot-ready curve file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub suite: Suite,
    pub x1: f64,
    pub truth: f64,
    pub estimate: f64,
    /// Pointwise 95% band (regression only).
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub n: usize,
    pub p: usize,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Mean absolute error of the estimate against the truth on the curve
    /// points.
    pub curve_mae: f64,
    /// Whether every worker count produced the identical posterior.
    pub identical_across_workers: bool,
}

#[derive(Clone, Debug)]
pub struct BenchOutput {
    pub reports: Vec<SuiteReport>,
    pub curve: Vec<CurvePoint>,
}

fn truth(ds: &Dataset) -> Result<&[f64]> {
    ds.truth
        .as_deref()
        .ok_or_else(|| SbartError::InvalidArgument("synthetic dataset without a truth column".into()))
}

/// Trains once per worker count. Returns the first run and the wall times of
/// the sampling loops.
fn train_across(problem: &Problem, config: &SamplerConfig, opts: &BenchOptions) -> Result<(RunOutput, BTreeMap<usize, f64>, bool)> {
    if opts.workers.is_empty() {
        return invalid("no worker counts to benchmark");
    }
    let mut timings = BTreeMap::new();
    let mut first: Option<RunOutput> = None;
    let mut identical = true;
    for &k in &opts.workers {
        log::info!("training with {k} worker(s)");
        let run = train(
            problem,
            config,
            TrainOptions {
                workers: k,
                transport: opts.transport,
                ..Default::default()
            },
        )?;
        timings.insert(k, run.chain.elapsed.as_secs_f64());
        match &first {
            None => first = Some(run),
            Some(f) => identical &= f.posterior.encode() == run.posterior.encode(),
        }
    }
    Ok((first.expect("at least one run"), timings, identical))
}

pub fn run_friedman(opts: &BenchOptions) -> Result<(SuiteReport, Vec<CurvePoint>)> {
    let train_ds = gen_friedman(opts.n, opts.p, opts.noise_sd, opts.data_seed)?;
    let test_ds = gen_friedman(opts.n_test, opts.p, 0.0, opts.data_seed.wrapping_add(1))?;
    let problem = Problem::new(&train_ds, Mode::Regression)?;
    let config = SamplerConfig {
        mode: Mode::Regression,
        ..opts.config.clone()
    };
    let (run, timings, identical) = train_across(&problem, &config, opts)?;
    let pred = run.posterior.predict(&test_ds.x, &[0.025, 0.975])?;
    let f0 = truth(&test_ds)?;
    let err = rmse(&pred.mean, f0)?;
    let mut curve: Vec<CurvePoint> = (0..test_ds.n())
        .map(|i| CurvePoint {
            suite: Suite::Friedman,
            x1: test_ds.row(i)[0],
            truth: f0[i],
            estimate: pred.mean[i],
            lower: Some(pred.quantiles[i][0]),
            upper: Some(pred.quantiles[i][1]),
        })
        .collect();
    curve.sort_by(|a, b| a.truth.total_cmp(&b.truth));
    let report = SuiteReport {
        suite: Suite::Friedman,
        n: opts.n,
        p: opts.p,
        metrics: MetricsReport {
            rmse: Some(err),
            ..Default::default()
        }
        .with_timings(timings),
        curve_mae: mean_abs_error(&pred.mean, f0)?,
        identical_across_workers: identical,
    };
    Ok((report, curve))
}

pub fn run_logistic(opts: &BenchOptions) -> Result<(SuiteReport, Vec<CurvePoint>)> {
    let train_ds = gen_logistic_binary(opts.n, opts.p, opts.data_seed)?;
    let test_ds = gen_logistic_binary(opts.n_test, opts.p, opts.data_seed.wrapping_add(1))?;
    let grid = logistic_grid(opts.grid_points, opts.p, opts.data_seed.wrapping_add(2))?;
    let problem = Problem::new(&train_ds, Mode::Classification)?;
    let config = SamplerConfig {
        mode: Mode::Classification,
        ..opts.config.clone()
    };
    let (run, timings, identical) = train_across(&problem, &config, opts)?;
    let held_out = run.posterior.predict(&test_ds.x, &[])?;
    let on_grid = run.posterior.predict(&grid.x, &[])?;
    let grid_truth = truth(&grid)?;
    let curve = (0..grid.n())
        .map(|i| CurvePoint {
            suite: Suite::Logistic,
            x1: grid.row(i)[0],
            truth: grid_truth[i],
            estimate: on_grid.mean[i],
            lower: None,
            upper: None,
        })
        .collect();
    let report = SuiteReport {
        suite: Suite::Logistic,
        n: opts.n,
        p: opts.p,
        metrics: MetricsReport {
            auc: Some(compute_auc(&held_out.mean, &test_ds.y)?),
            confusion: Some(confusion_matrix(&held_out.mean, &test_ds.y)?),
            ..Default::default()
        }
        .with_timings(timings),
        curve_mae: mean_abs_error(&on_grid.mean, grid_truth)?,
        identical_across_workers: identical,
    };
    Ok((report, curve))
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchOutput> {
    let mut reports = Vec::new();
    let mut curve = Vec::new();
    for suite in &opts.suites {
        let (r, c) = match suite {
            Suite::Friedman => run_friedman(opts)?,
            Suite::Logistic => run_logistic(opts)?,
        };
        reports.push(r);
        curve.extend(c);
    }
    Ok(BenchOutput { reports, curve })
}

pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SbartError::Io(e.into()))?;
    w.write_record(["suite", "x1", "truth", "estimate", "lower", "upper"])
        .map_err(|e| SbartError::Io(e.into()))?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for pt in points {
        let suite = match pt.suite {
            Suite::Friedman => "friedman",
            Suite::Logistic => "logistic",
        };
        w.write_record([
            suite.to_string(),
            pt.x1.to_string(),
            pt.truth.to_string(),
            pt.estimate.to_string(),
            opt(pt.lower),
            opt(pt.upper),
        ])
        .map_err(|e| SbartError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports_json(reports: &[SuiteReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, reports).map_err(|e| SbartError::Io(e.into()))?;
    f.write_all(b"\n")?;
    Ok(())
}
