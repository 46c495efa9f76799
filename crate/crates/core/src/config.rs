//! Run configuration files.
//!
//! A TOML file with run-level keys at the top and sampler settings under
//! `[sampler]`:
//!
//! ```toml
//! data = "train.csv"
//! target = "y"
//! workers = 4
//! transport = "tcp"
//!
//! [sampler]
//! mode = "regression"
//! trees = 50
//! iterations = 1000
//! burn_in = 500
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SbartError};
use crate::runtime::{TrainOptions, TransportKind};
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub target: String,
    pub out: PathBuf,
    pub workers: usize,
    pub transport: TransportKind,
    /// One `host:port` per rank; required for multi-process runs.
    pub topology: Option<PathBuf>,
    pub timeout_secs: u64,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            target: "y".into(),
            out: PathBuf::from("out"),
            workers: 1,
            transport: TransportKind::InProc,
            topology: None,
            timeout_secs: 120,
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SbartError::InvalidArgument(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.workers == 0 {
            return invalid("workers must be at least 1");
        }
        if self.timeout_secs == 0 {
            return invalid("timeout must be positive");
        }
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            workers: self.workers,
            transport: self.transport,
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }
}
