//! Datasets, shards, CSV ingestion and the synthetic generators used by the
//! benchmark suites.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result, SbartError};
use crate::tree::logistic;

/// Column names with the observed range of every covariate.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnMeta {
    pub names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ColumnMeta {
    /// Covariates already living in the unit cube.
    pub fn unit(p: usize) -> Self {
        Self {
            names: (0..p).map(|j| format!("x{}", j + 1)).collect(),
            min: vec![0.0; p],
            max: vec![1.0; p],
        }
    }

    pub fn from_rows(x: &[f64], p: usize, names: Vec<String>) -> Self {
        let mut min = vec![f64::INFINITY; p];
        let mut max = vec![f64::NEG_INFINITY; p];
        for row in x.chunks_exact(p) {
            for j in 0..p {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Self { names, min, max }
    }

    pub fn p(&self) -> usize {
        self.min.len()
    }

    /// Maps a raw row into the unit cube spanned by the observed ranges.
    /// Constant columns map to 0.5.
    pub fn scale_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (j, &v) in row.iter().enumerate() {
            let span = self.max[j] - self.min[j];
            out.push(if span > 0.0 { (v - self.min[j]) / span } else { 0.5 });
        }
    }

    pub fn scale_rows(&self, x: &[f64]) -> Vec<f64> {
        let p = self.p();
        let mut out = Vec::with_capacity(x.len());
        let mut buf = Vec::with_capacity(p);
        for row in x.chunks_exact(p) {
            self.scale_row(row, &mut buf);
            out.extend_from_slice(&buf);
        }
        out
    }
}

/// A rectangular numeric dataset with row-major covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub p: usize,
    pub names: Vec<String>,
    pub target: String,
    /// Noiseless truth for synthetic data: f0 for regression, P(y = 1) for
    /// classification.
    pub truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn column_meta(&self) -> ColumnMeta {
        ColumnMeta::from_rows(&self.x, self.p, self.names.clone())
    }

    pub fn check_binary(&self) -> Result<()> {
        match self.y.iter().position(|&v| v != 0.0 && v != 1.0) {
            Some(i) => invalid(format!("target value {} at row {} is not 0 or 1", self.y[i], i + 1)),
            None => Ok(()),
        }
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            x: self.x[start * self.p..end * self.p].to_vec(),
            y: self.y[start..end].to_vec(),
            p: self.p,
            names: self.names.clone(),
            target: self.target.clone(),
            truth: self.truth.as_ref().map(|t| t[start..end].to_vec()),
        }
    }
}

/// One rank's contiguous slice of the (scaled) training data.
#[derive(Clone, Debug)]
pub struct DataShard {
    x: Vec<f64>,
    y: Vec<f64>,
    p: usize,
    pub global_offset: usize,
    pub meta: ColumnMeta,
}

impl DataShard {
    pub fn new(x: Vec<f64>, y: Vec<f64>, p: usize, global_offset: usize, meta: ColumnMeta) -> Result<Self> {
        if p == 0 || x.len() != y.len() * p {
            return invalid(format!(
                "shard has {} covariate values for {} rows of width {p}",
                x.len(),
                y.len()
            ));
        }
        Ok(Self {
            x,
            y,
            p,
            global_offset,
            meta,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }
}

/// Splits `n` rows into `k` contiguous shards whose sizes differ by at most
/// one; the first `n % k` shards get the extra row.
pub fn shard_bounds(n: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return invalid("worker count must be at least 1");
    }
    if k > n {
        return invalid(format!("cannot split {n} rows across {k} workers"));
    }
    let base = n / k;
    let extra = n % k;
    let mut start = 0;
    Ok((0..k)
        .map(|r| {
            let len = base + usize::from(r < extra);
            let b = (start, start + len);
            start += len;
            b
        })
        .collect())
}

/// Partitions already-scaled covariates `x` and responses `y` across `k` ranks.
pub fn partition_data(x: &[f64], y: &[f64], meta: &ColumnMeta, k: usize) -> Result<Vec<DataShard>> {
    let p = meta.p();
    shard_bounds(y.len(), k)?
        .into_iter()
        .map(|(s, e)| DataShard::new(x[s * p..e * p].to_vec(), y[s..e].to_vec(), p, s, meta.clone()))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub target: String,
    /// Columns to ignore entirely (for example a stored truth column).
    pub exclude: Vec<String>,
    /// Column to read as the synthetic truth, if present.
    pub truth: Option<String>,
    /// Accept files without the target column; the response is then NaN.
    pub optional_target: bool,
}

impl IngestOptions {
    pub fn new(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            exclude: Vec::new(),
            truth: Some("truth".into()),
            optional_target: false,
        }
    }
}

/// Reads a numeric CSV with a header row.
pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(std::io::BufReader::new(file));
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| SbartError::Schema(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target_idx = headers.iter().position(|h| *h == opts.target);
    if target_idx.is_none() && !opts.optional_target {
        return Err(SbartError::Schema(format!("target column '{}' not found", opts.target)));
    }
    let truth_idx = opts
        .truth
        .as_ref()
        .and_then(|t| headers.iter().position(|h| h == t));
    let covariates: Vec<usize> = (0..headers.len())
        .filter(|&j| Some(j) != target_idx && Some(j) != truth_idx && !opts.exclude.contains(&headers[j]))
        .collect();
    if covariates.is_empty() {
        return Err(SbartError::Schema("no covariate columns".into()));
    }
    let p = covariates.len();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut truth = truth_idx.map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| SbartError::Parse {
            row,
            column: "-".into(),
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(SbartError::Parse {
                row,
                column: "-".into(),
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let cell = |j: usize| -> Result<f64> {
            record[j].trim().parse::<f64>().map_err(|_| SbartError::Parse {
                row,
                column: headers[j].clone(),
                msg: format!("'{}' is not a number", &record[j]),
            })
        };
        for &j in &covariates {
            x.push(cell(j)?);
        }
        y.push(match target_idx {
            Some(j) => cell(j)?,
            None => f64::NAN,
        });
        if let (Some(t), Some(j)) = (truth.as_mut(), truth_idx) {
            t.push(cell(j)?);
        }
    }
    Ok(Dataset {
        x,
        y,
        p,
        names: covariates.iter().map(|&j| headers[j].clone()).collect(),
        target: opts.target.clone(),
        truth,
    })
}

/// Writes covariates, target and (when present) the truth column.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SbartError::Io(e.into()))?;
    let mut header: Vec<&str> = ds.names.iter().map(String::as_str).collect();
    header.push(&ds.target);
    if ds.truth.is_some() {
        header.push("truth");
    }
    w.write_record(&header).map_err(|e| SbartError::Io(e.into()))?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        rec.extend(ds.row(i).iter().map(|v| v.to_string()));
        rec.push(ds.y[i].to_string());
        if let Some(t) = &ds.truth {
            rec.push(t[i].to_string());
        }
        w.write_record(&rec).map_err(|e| SbartError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// The Friedman benchmark function on the first five covariates.
pub fn friedman_f0(x: &[f64]) -> f64 {
    10.0 * (2.0 * PI * x[0] * x[1]).sin() + (x[2] - 0.5).powi(2) + x[3] + x[4]
}

fn default_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("x{}", j + 1)).collect()
}

/// Friedman regression data: covariates uniform on the unit cube plus
/// Gaussian noise of standard deviation `noise_sd`.
pub fn gen_friedman(n: usize, p: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if p < 5 {
        return invalid(format!("the Friedman function needs p >= 5, got {p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(0.0)).map_err(|e| SbartError::InvalidArgument(e.to_string()))?;
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        x.extend((0..p).map(|_| rng.random::<f64>()));
        let f0 = friedman_f0(&x[start..]);
        truth.push(f0);
        y.push(f0 + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 });
    }
    Ok(Dataset {
        x,
        y,
        p,
        names: default_names(p),
        target: "y".into(),
        truth: Some(truth),
    })
}

/// True event probability of the logistic benchmark.
pub fn logistic_truth(x1: f64) -> f64 {
    logistic(0.4 + 0.5 * x1)
}

fn logistic_rows(rng: &mut ChaCha8Rng, p: usize, first: impl Iterator<Item = Option<f64>>) -> Dataset {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut truth = Vec::new();
    for fixed in first {
        let x1 = fixed.unwrap_or_else(|| rng.random_range(-10.0..10.0));
        x.push(x1);
        x.extend((1..p).map(|_| rng.random_range(-10.0..10.0)));
        let prob = logistic_truth(x1);
        truth.push(prob);
        y.push(if rng.random::<f64>() < prob { 1.0 } else { 0.0 });
    }
    Dataset {
        x,
        y,
        p,
        names: default_names(p),
        target: "y".into(),
        truth: Some(truth),
    }
}

/// Binary data with P(y = 1 | x) = logistic(0.4 + 0.5 x1) and covariates
/// uniform on [-10, 10].
pub fn gen_logistic_binary(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    if p == 0 {
        return invalid("need at least one covariate");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(logistic_rows(&mut rng, p, std::iter::repeat_n(None, n)))
}

/// Test grid for the logistic benchmark: x1 evenly spaced over [-10, 10],
/// remaining covariates uniform.
pub fn logistic_grid(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    if p == 0 || n < 2 {
        return invalid("grid needs p >= 1 and at least two points");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = 20.0 / (n - 1) as f64;
    Ok(logistic_rows(
        &mut rng,
        p,
        (0..n).map(|i| Some(-10.0 + step * i as f64)),
    ))
}
