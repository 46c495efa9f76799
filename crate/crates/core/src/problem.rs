//! Turns a raw dataset into the scaled working problem every rank agrees on.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ColumnMeta, Dataset};
use crate::error::{invalid, Result, SbartError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    #[serde(alias = "reg")]
    Regression,
    #[serde(alias = "class")]
    Classification,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Regression => 0,
            Mode::Classification => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Mode::Regression),
            1 => Ok(Mode::Classification),
            c => invalid(format!("unknown mode code {c}")),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = SbartError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reg" | "regression" => Ok(Mode::Regression),
            "class" | "classification" => Ok(Mode::Classification),
            other => invalid(format!("unknown mode '{other}' (expected reg or class)")),
        }
    }
}

/// Maps the raw response onto the scale the sampler works in.
///
/// Regression responses are mapped linearly onto `[-0.5, 0.5]`;
/// classification labels are used as they are.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResponseTransform {
    Regression { min: f64, max: f64 },
    Classification,
}

impl ResponseTransform {
    pub fn mode(&self) -> Mode {
        match self {
            ResponseTransform::Regression { .. } => Mode::Regression,
            ResponseTransform::Classification => Mode::Classification,
        }
    }

    fn span(min: f64, max: f64) -> f64 {
        if max > min {
            max - min
        } else {
            1.0
        }
    }

    pub fn to_scaled(&self, y: f64) -> f64 {
        match *self {
            ResponseTransform::Regression { min, max } => (y - min) / Self::span(min, max) - 0.5,
            ResponseTransform::Classification => y,
        }
    }

    pub fn from_scaled(&self, v: f64) -> f64 {
        match *self {
            ResponseTransform::Regression { min, max } => (v + 0.5) * Self::span(min, max) + min,
            ResponseTransform::Classification => v,
        }
    }

    /// Factor converting a scaled standard deviation back to raw units.
    pub fn scale(&self) -> f64 {
        match *self {
            ResponseTransform::Regression { min, max } => Self::span(min, max),
            ResponseTransform::Classification => 1.0,
        }
    }
}

/// The whole training problem on the sampler's scale: covariates in the unit
/// cube, the working response, and the constant offset added to the forest.
#[derive(Clone, Debug)]
pub struct Problem {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub p: usize,
    pub meta: ColumnMeta,
    pub transform: ResponseTransform,
    pub offset: f64,
    pub target: String,
}

impl Problem {
    pub fn new(ds: &Dataset, mode: Mode) -> Result<Self> {
        if ds.n() == 0 {
            return invalid("dataset has no rows");
        }
        if ds.p == 0 {
            return invalid("dataset has no covariates");
        }
        if ds.x.iter().chain(&ds.y).any(|v| !v.is_finite()) {
            return invalid("dataset contains non-finite values");
        }
        let meta = ds.column_meta();
        let x = meta.scale_rows(&ds.x);
        let n = ds.n() as f64;
        let (transform, y, offset) = match mode {
            Mode::Regression => {
                let min = ds.y.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = ds.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let t = ResponseTransform::Regression { min, max };
                let y: Vec<f64> = ds.y.iter().map(|&v| t.to_scaled(v)).collect();
                let offset = y.iter().sum::<f64>() / n;
                (t, y, offset)
            }
            Mode::Classification => {
                ds.check_binary()?;
                let rate = (ds.y.iter().sum::<f64>() / n).clamp(1e-3, 1.0 - 1e-3);
                let offset = Normal::standard().inverse_cdf(rate);
                (ResponseTransform::Classification, ds.y.clone(), offset)
            }
        };
        Ok(Self {
            x,
            y,
            p: ds.p,
            meta,
            transform,
            offset,
            target: ds.target.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn mode(&self) -> Mode {
        self.transform.mode()
    }

    /// Sample variance of the working response around the offset; the noise
    /// prior is calibrated against it.
    pub fn response_variance(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let var = self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        if var > 0.0 {
            var
        } else {
            1e-4
        }
    }

    /// Stable bytes describing the data layout; part of the config hash.
    pub fn schema_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.n() as u64).to_le_bytes());
        out.extend_from_slice(&(self.p as u64).to_le_bytes());
        out.push(self.mode().code());
        for (j, name) in self.meta.names.iter().enumerate() {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.extend_from_slice(&self.meta.min[j].to_le_bytes());
            out.extend_from_slice(&self.meta.max[j].to_le_bytes());
        }
        out.extend_from_slice(self.target.as_bytes());
        out.push(0);
        if let ResponseTransform::Regression { min, max } = self.transform {
            out.extend_from_slice(&min.to_le_bytes());
            out.extend_from_slice(&max.to_le_bytes());
        }
        out.extend_from_slice(&self.offset.to_le_bytes());
        out
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
