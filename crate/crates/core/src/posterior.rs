//! The posterior sample file.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "SBARTPOS", version u16
//! header: config hash u64, covariate hash u64, seed u64, mode u8,
//!         trees u32, p u32, per column {name len u32, name bytes, min f64, max f64},
//!         target {len u32, bytes}, response min f64, response max f64, offset f64,
//!         sampler settings as JSON {len u32, bytes}
//! count u32, then per sample:
//!         iteration u32, sigma f64, concentration f64, split probs p x f64, forest
//! ```
//!
//! Nothing in the file depends on the worker count or on the clock, so equal
//! chains give byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::ColumnMeta;
use crate::error::{invalid, Result, SbartError};
use crate::problem::{fnv1a, Mode, Problem, ResponseTransform};
use crate::sampler::{predict_posterior, Prediction, SamplerConfig};
use crate::tree::Forest;
use crate::wire::{put_f64, put_u32, put_u64, Reader};

const MAGIC: &[u8; 8] = b"SBARTPOS";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub iteration: u32,
    /// Noise standard deviation on the response's original scale.
    pub sigma: f64,
    pub concentration: f64,
    pub split_probs: Vec<f64>,
    pub forest: Forest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorHeader {
    pub config_hash: u64,
    pub seed: u64,
    pub mode: Mode,
    pub trees: usize,
    pub meta: ColumnMeta,
    pub target: String,
    pub transform: ResponseTransform,
    pub offset: f64,
    /// The sampler settings of the run.
    pub config: SamplerConfig,
}

impl PosteriorHeader {
    pub fn new(problem: &Problem, config: &SamplerConfig, config_hash: u64) -> Self {
        Self {
            config_hash,
            seed: config.seed,
            mode: problem.mode(),
            trees: config.trees,
            meta: problem.meta.clone(),
            target: problem.target.clone(),
            transform: problem.transform,
            offset: problem.offset,
            config: config.clone(),
        }
    }

    pub fn p(&self) -> usize {
        self.meta.p()
    }

    /// Hash of the covariate names, which new data must reproduce.
    pub fn covariate_hash(&self) -> u64 {
        covariate_hash(&self.meta.names)
    }
}

pub fn covariate_hash(names: &[String]) -> u64 {
    let mut buf = Vec::new();
    for n in names {
        buf.extend_from_slice(n.as_bytes());
        buf.push(0);
    }
    fnv1a(&buf)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub header: PosteriorHeader,
    pub samples: Vec<PosteriorSample>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|e| SbartError::InvalidArgument(e.to_string()))
}

impl Posterior {
    pub fn encode(&self) -> Vec<u8> {
        let h = &self.header;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut buf, h.config_hash);
        put_u64(&mut buf, h.covariate_hash());
        put_u64(&mut buf, h.seed);
        buf.push(h.mode.code());
        put_u32(&mut buf, h.trees as u32);
        put_u32(&mut buf, h.p() as u32);
        for j in 0..h.p() {
            put_str(&mut buf, &h.meta.names[j]);
            put_f64(&mut buf, h.meta.min[j]);
            put_f64(&mut buf, h.meta.max[j]);
        }
        put_str(&mut buf, &h.target);
        let (lo, hi) = match h.transform {
            ResponseTransform::Regression { min, max } => (min, max),
            ResponseTransform::Classification => (0.0, 1.0),
        };
        put_f64(&mut buf, lo);
        put_f64(&mut buf, hi);
        put_f64(&mut buf, h.offset);
        put_str(&mut buf, &String::from_utf8(h.config.hash_bytes()).expect("JSON is UTF-8"));
        put_u32(&mut buf, self.samples.len() as u32);
        for s in &self.samples {
            put_u32(&mut buf, s.iteration);
            put_f64(&mut buf, s.sigma);
            put_f64(&mut buf, s.concentration);
            for &v in &s.split_probs {
                put_f64(&mut buf, v);
            }
            s.forest.encode(&mut buf);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return invalid("not a posterior file");
        }
        let version = r.u16()?;
        if version != VERSION {
            return invalid(format!("unsupported posterior file version {version}"));
        }
        let config_hash = r.u64()?;
        let cov_hash = r.u64()?;
        let seed = r.u64()?;
        let mode = Mode::from_code(r.u8()?)?;
        let trees = r.u32()? as usize;
        let p = r.u32()? as usize;
        let mut meta = ColumnMeta {
            names: Vec::with_capacity(p),
            min: Vec::with_capacity(p),
            max: Vec::with_capacity(p),
        };
        for _ in 0..p {
            meta.names.push(read_str(&mut r)?);
            meta.min.push(r.f64()?);
            meta.max.push(r.f64()?);
        }
        let target = read_str(&mut r)?;
        let (lo, hi) = (r.f64()?, r.f64()?);
        let transform = match mode {
            Mode::Regression => ResponseTransform::Regression { min: lo, max: hi },
            Mode::Classification => ResponseTransform::Classification,
        };
        let offset = r.f64()?;
        let config: SamplerConfig = serde_json::from_str(&read_str(&mut r)?)
            .map_err(|e| SbartError::InvalidArgument(format!("posterior header settings: {e}")))?;
        if config.seed != seed || config.trees != trees || config.mode != mode {
            return invalid("posterior header is corrupt (settings disagree with the header)");
        }
        let header = PosteriorHeader {
            config_hash,
            seed,
            mode,
            trees,
            meta,
            target,
            transform,
            offset,
            config,
        };
        if header.covariate_hash() != cov_hash {
            return invalid("posterior header is corrupt (covariate hash mismatch)");
        }
        let count = r.u32()? as usize;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let iteration = r.u32()?;
            let sigma = r.f64()?;
            let concentration = r.f64()?;
            let split_probs = r.f64_vec(p)?;
            let (forest, used) = Forest::decode(r.remaining())?;
            r.advance(used);
            if forest.len() != trees {
                return invalid(format!("sample has {} trees, header says {trees}", forest.len()));
            }
            samples.push(PosteriorSample {
                iteration,
                sigma,
                concentration,
                split_probs,
                forest,
            });
        }
        r.finish()?;
        Ok(Self { header, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn forests(&self) -> Vec<Forest> {
        self.samples.iter().map(|s| s.forest.clone()).collect()
    }

    /// Refuses data whose covariate columns differ from the training data's.
    pub fn check_columns(&self, names: &[String]) -> Result<()> {
        if covariate_hash(names) != self.header.covariate_hash() {
            return Err(SbartError::Schema(format!(
                "covariates [{}] do not match the posterior's [{}]",
                names.join(", "),
                self.header.meta.names.join(", ")
            )));
        }
        Ok(())
    }

    /// Posterior summaries at raw (unscaled) rows.
    pub fn predict(&self, x_raw: &[f64], levels: &[f64]) -> Result<Prediction> {
        let x = self.header.meta.scale_rows(x_raw);
        predict_posterior(&self.forests(), &x, self.header.p(), &self.header.transform, self.header.offset, levels)
    }
}
