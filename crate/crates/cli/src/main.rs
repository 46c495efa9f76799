use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sbart::bench::{run_bench, write_curve_csv, write_reports_json, BenchOptions, Suite};
use sbart::config::RunConfig;
use sbart::data::{gen_friedman, gen_logistic_binary, ingest_csv, logistic_grid, write_csv, Dataset, IngestOptions};
use sbart::metrics::{compute_auc, confusion_matrix, rmse, MetricsReport};
use sbart::posterior::Posterior;
use sbart::problem::{Mode, Problem};
use sbart::runtime::{self, connect_workers, run_master, run_worker, serve_worker_tcp, JobSpec, RunOutput, Topology, TransportKind};
use sbart::sampler::{Counters, IterationRecord};

#[derive(Parser)]
#[command(name = "sbart", version, about = "Distributed soft Bayesian additive regression trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write posterior samples and diagnostics.
    Train(TrainArgs),
    /// Posterior summaries for new rows.
    Predict(PredictArgs),
    /// Run the benchmark suites across worker counts.
    Bench(BenchArgs),
    /// Write a synthetic dataset.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Reg,
    Class,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Reg => Mode::Regression,
            ModeArg::Class => Mode::Classification,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

impl From<TransportArg> for TransportKind {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Inproc => TransportKind::InProc,
            TransportArg::Tcp => TransportKind::Tcp,
        }
    }
}

/// Settings shared by `train` and `bench`; each overrides the config file.
#[derive(Args, Clone)]
struct SamplerArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
}

impl SamplerArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        let s = &mut c.sampler;
        if let Some(v) = self.trees {
            s.trees = v;
        }
        if let Some(v) = self.iters {
            s.iterations = v;
        }
        if let Some(v) = self.burnin {
            s.burn_in = v;
        }
        if let Some(v) = self.thin {
            s.thin = v;
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(t) = self.transport {
            c.transport = t.into();
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Number of ranks, the master included.
    #[arg(long)]
    workers: Option<usize>,
    /// One host:port per rank; with --rank, runs one rank of a
    /// multi-process job.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long, requires = "topology")]
    rank: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Response column; used for metrics when present in the file.
    #[arg(long, default_value = "y")]
    target: String,
    /// Quantile levels for regression intervals.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.025, 0.975])]
    quantiles: Vec<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Friedman,
    Logistic,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long = "suite", value_enum)]
    suites: Vec<SuiteArg>,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 1_000)]
    n_test: usize,
    #[arg(long, default_value_t = 40)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Worker counts to time.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2])]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 2024)]
    data_seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Friedman,
    Logistic,
    LogisticGrid,
}

#[derive(Args)]
struct GenArgs {
    #[arg(value_enum)]
    kind: GenKind,
    #[arg(long, default_value_t = 1_000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

/// Files a command creates. They are deleted unless the command finishes.
struct Outputs {
    created_dir: Option<PathBuf>,
    files: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn in_dir(dir: &Path) -> Result<Self> {
        let created_dir = if dir.exists() {
            None
        } else {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            Some(dir.to_path_buf())
        };
        Ok(Self {
            created_dir,
            files: Vec::new(),
            done: false,
        })
    }

    fn single() -> Self {
        Self {
            created_dir: None,
            files: Vec::new(),
            done: false,
        }
    }

    fn path(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(d) = &self.created_dir {
            let _ = fs::remove_dir(d);
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_diagnostics(records: &[IterationRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    workers: usize,
    samples: usize,
    /// In-sample fit of the posterior mean.
    #[serde(flatten)]
    metrics: MetricsReport,
    counters: Counters,
    comm: runtime::CommStats,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut rc = args.sampler.load()?;
    if let Some(d) = args.data {
        rc.data = Some(d);
    }
    if let Some(t) = args.target {
        rc.target = t;
    }
    if let Some(m) = args.mode {
        rc.sampler.mode = m.into();
    }
    if let Some(k) = args.workers {
        rc.workers = k;
    }
    if let Some(t) = args.topology {
        rc.topology = Some(t);
    }
    if let Some(o) = args.out {
        rc.out = o;
    }
    rc.validate()?;
    let data = rc.data.clone().context("no training data given (use --data)")?;
    let ds = ingest_csv(&data, &IngestOptions::new(rc.target.clone())).with_context(|| format!("reading {}", data.display()))?;
    log::info!("read {} rows with {} covariates from {}", ds.n(), ds.p, data.display());
    let problem = Problem::new(&ds, rc.sampler.mode)?;
    let job = JobSpec::new(&rc.sampler, &problem)?;
    let timeout = Duration::from_secs(rc.timeout_secs);

    let mut workers = rc.workers;
    let run: RunOutput = match (&rc.topology, args.rank) {
        (Some(path), Some(rank)) => {
            let topology = Topology::from_file(path)?;
            workers = topology.size();
            let mut shards = runtime::shards(&problem, topology.size())?;
            if rank >= shards.len() {
                bail!("rank {rank} is outside the topology of {} ranks", shards.len());
            }
            let shard = shards.swap_remove(rank);
            if rank > 0 {
                let comm = serve_worker_tcp(&topology, rank, timeout)?;
                run_worker(&job, shard, comm)?;
                log::info!("rank {rank} finished");
                return Ok(());
            }
            let comm = connect_workers(&topology, timeout, timeout)?;
            run_master(&job, shard, comm)?
        }
        (Some(_), None) => bail!("--topology needs --rank to say which rank this process is"),
        (None, _) => runtime::train(&problem, &rc.sampler, rc.train_options())?,
    };

    let mut outputs = Outputs::in_dir(&rc.out)?;
    run.posterior.write(&outputs.path(rc.out.join("posterior.bin")))?;
    write_diagnostics(&run.chain.diagnostics, &outputs.path(rc.out.join("diagnostics.csv")))?;
    let fitted = run.posterior.predict(&ds.x, &[])?;
    let metrics = match problem.mode() {
        Mode::Regression => MetricsReport {
            rmse: Some(rmse(&fitted.mean, &ds.y)?),
            ..Default::default()
        },
        Mode::Classification => MetricsReport {
            auc: compute_auc(&fitted.mean, &ds.y).ok(),
            confusion: Some(confusion_matrix(&fitted.mean, &ds.y)?),
            ..Default::default()
        },
    };
    let summary = TrainSummary {
        config_hash: format!("{:016x}", job.config_hash),
        workers,
        samples: run.posterior.samples.len(),
        metrics: metrics.with_timings(BTreeMap::from([(workers, run.chain.elapsed.as_secs_f64())])),
        counters: run.chain.counters.clone(),
        comm: run.comm.clone(),
    };
    write_json(&summary, &outputs.path(rc.out.join("metrics.json")))?;
    outputs.done = true;
    println!(
        "{} posterior samples in {:.2}s; wrote {}",
        run.posterior.samples.len(),
        run.chain.elapsed.as_secs_f64(),
        rc.out.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let posterior = Posterior::read(&args.posterior).with_context(|| format!("reading {}", args.posterior.display()))?;
    let mut opts = IngestOptions::new(args.target.clone());
    opts.optional_target = true;
    let ds = ingest_csv(&args.data, &opts).with_context(|| format!("reading {}", args.data.display()))?;
    posterior.check_columns(&ds.names)?;
    let levels = if posterior.header.mode == Mode::Regression { args.quantiles.clone() } else { Vec::new() };
    let pred = posterior.predict(&ds.x, &levels)?;

    let mut outputs = Outputs::in_dir(&args.out)?;
    let path = outputs.path(args.out.join("predictions.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["row".to_string()];
    match posterior.header.mode {
        Mode::Regression => {
            header.push("mean".into());
            header.extend(pred.quantile_levels.iter().map(|q| format!("q{q}")));
        }
        Mode::Classification => header.push("probability".into()),
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![i.to_string(), pred.mean[i].to_string()];
        if let Some(qs) = pred.quantiles.get(i) {
            rec.extend(qs.iter().map(f64::to_string));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    if ds.y.iter().all(|v| v.is_finite()) {
        let report = match posterior.header.mode {
            Mode::Regression => MetricsReport {
                rmse: Some(rmse(&pred.mean, ds.truth.as_deref().unwrap_or(&ds.y))?),
                ..Default::default()
            },
            Mode::Classification => MetricsReport {
                auc: compute_auc(&pred.mean, &ds.y).ok(),
                confusion: Some(confusion_matrix(&pred.mean, &ds.y)?),
                ..Default::default()
            },
        };
        write_json(&report, &outputs.path(args.out.join("metrics.json")))?;
    }
    outputs.done = true;
    println!("wrote predictions for {} rows to {}", ds.n(), path.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let rc = args.sampler.load()?;
    rc.validate()?;
    let suites = if args.suites.is_empty() {
        vec![Suite::Friedman, Suite::Logistic]
    } else {
        args.suites
            .iter()
            .map(|s| match s {
                SuiteArg::Friedman => Suite::Friedman,
                SuiteArg::Logistic => Suite::Logistic,
            })
            .collect()
    };
    let opts = BenchOptions {
        suites,
        n: args.n,
        n_test: args.n_test,
        p: args.p,
        noise_sd: args.noise,
        workers: args.workers,
        transport: rc.transport,
        data_seed: args.data_seed,
        config: rc.sampler,
        ..Default::default()
    };
    let out = run_bench(&opts)?;
    let mut outputs = Outputs::in_dir(&args.out)?;
    write_reports_json(&out.reports, &outputs.path(args.out.join("metrics.json")))?;
    write_curve_csv(&out.curve, &outputs.path(args.out.join("curve.csv")))?;
    outputs.done = true;
    for r in &out.reports {
        let times: Vec<String> = r.metrics.wall_time_seconds.iter().map(|(k, t)| format!("K={k}: {t:.2}s")).collect();
        println!("{:?}: {}", r.suite, times.join(", "));
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let ds: Dataset = match args.kind {
        GenKind::Friedman => gen_friedman(args.n, args.p, args.noise, args.seed)?,
        GenKind::Logistic => gen_logistic_binary(args.n, args.p, args.seed)?,
        GenKind::LogisticGrid => logistic_grid(args.n, args.p, args.seed)?,
    };
    let mut outputs = match args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => Outputs::in_dir(dir)?,
        None => Outputs::single(),
    };
    write_csv(&ds, &outputs.path(args.out.clone()))?;
    outputs.done = true;
    println!("wrote {} rows to {}", ds.n(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gen(a) => cmd_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
