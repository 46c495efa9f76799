//! The Gibbs/Metropolis sweep over the forest.
//!
//! Each tree update is a structure move (grow, prune or change), then a
//! bandwidth move, then a leaf draw. The sampler never touches the data
//! directly: every statistic comes from a [`StatProvider`], which in practice
//! is the cluster of shard engines in [`crate::runtime`]. A single-process run
//! is simply a cluster of one.

mod chain;
mod latent;
mod moves;
mod predict;

pub use chain::{
    forest_hash, gibbs_iteration, run_chain, update_tree, ChainOutput, ChainState, Counters, Decision, IterationRecord,
    StatProvider, StepContext, TreeOutcome,
};
pub use latent::{draw_latent_classification, draw_truncated_normal, latent_rng};
pub use moves::{acceptance_log_ratio, apply_proposal, move_probabilities, propose_move, MoveKind, MoveProposal};
pub use predict::{predict_posterior, tree_residuals, Prediction};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::priors::{BandwidthPrior, ConcentrationGrid, NoisePrior, TreeShapePrior};
use crate::problem::Mode;

/// Relative frequencies of the three structure moves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveWeights {
    pub grow: f64,
    pub prune: f64,
    pub change: f64,
}

impl Default for MoveWeights {
    fn default() -> Self {
        Self {
            grow: 0.4,
            prune: 0.4,
            change: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMuMode {
    #[default]
    Fixed,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: Mode,
    pub trees: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub move_weights: MoveWeights,
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    /// Prior probability that the noise variance lies below the response
    /// variance.
    pub lambda_quantile: f64,
    /// Leaf prior calibration: `sigma_mu = 0.5 / k` for regression, `3 / k`
    /// for classification.
    pub k: f64,
    pub sigma_mu_mode: SigmaMuMode,
    /// Exponential rate of the bandwidth prior.
    pub bandwidth_rate: f64,
    /// Pins every tree's bandwidth and disables the bandwidth move.
    pub fixed_bandwidth: Option<f64>,
    /// Concentration grid as multiples of the covariate count.
    pub a_grid: Vec<f64>,
    /// Sample split-variable probabilities from the Dirichlet; when off they
    /// stay uniform.
    pub sparse: bool,
    /// When off, the data never enter any acceptance ratio or draw, so the
    /// chain samples the prior.
    pub likelihood: bool,
    /// Full statistic recompute after this many accepted moves on a tree.
    pub refresh_every: usize,
    /// Replica and fit consistency check interval, in iterations.
    pub check_every: usize,
    /// Visiting order of the trees within a sweep; natural order by default.
    pub sweep_order: Option<Vec<usize>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Regression,
            trees: 50,
            iterations: 1000,
            burn_in: 500,
            thin: 1,
            seed: 1,
            move_weights: MoveWeights::default(),
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            lambda_quantile: 0.9,
            k: 2.0,
            sigma_mu_mode: SigmaMuMode::Fixed,
            bandwidth_rate: 10.0,
            fixed_bandwidth: None,
            a_grid: vec![0.1, 0.5, 1.0, 2.0, 10.0],
            sparse: true,
            likelihood: true,
            refresh_every: 100,
            check_every: 50,
            sweep_order: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.trees > u16::MAX as usize {
            return invalid(format!("tree count must lie in 1..=65535, got {}", self.trees));
        }
        if self.iterations == 0 {
            return invalid("iterations must be positive");
        }
        if self.burn_in >= self.iterations {
            return invalid(format!(
                "burn-in ({}) must be smaller than the iteration count ({})",
                self.burn_in, self.iterations
            ));
        }
        if self.thin == 0 {
            return invalid("thin must be positive");
        }
        let w = self.move_weights;
        if [w.grow, w.prune, w.change].iter().any(|v| !(*v >= 0.0)) || !(w.grow > 0.0) || !(w.prune > 0.0) {
            return invalid("move weights must be nonnegative with positive grow and prune");
        }
        if ((w.grow + w.prune + w.change) - 1.0).abs() > 1e-9 {
            return invalid("move weights must sum to 1");
        }
        TreeShapePrior::new(self.alpha, self.beta)?;
        NoisePrior::new(self.nu, 1.0)?;
        if !(self.lambda_quantile > 0.0 && self.lambda_quantile < 1.0) {
            return invalid("lambda_quantile must lie in (0, 1)");
        }
        if !(self.k > 0.0) {
            return invalid("k must be positive");
        }
        BandwidthPrior::new(self.bandwidth_rate)?;
        if let Some(tau) = self.fixed_bandwidth {
            if !(tau > 0.0) || !tau.is_finite() {
                return invalid(format!("fixed bandwidth must be positive, got {tau}"));
            }
        }
        ConcentrationGrid::scaled(&self.a_grid, 1)?;
        if self.refresh_every == 0 || self.check_every == 0 {
            return invalid("refresh and check intervals must be positive");
        }
        if let Some(order) = &self.sweep_order {
            let mut seen = vec![false; self.trees];
            if order.len() != self.trees || order.iter().any(|&j| j >= self.trees || std::mem::replace(&mut seen[j], true)) {
                return invalid("sweep order must be a permutation of the tree indices");
            }
        }
        Ok(())
    }

    pub fn shape_prior(&self) -> TreeShapePrior {
        TreeShapePrior {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Starting bandwidth of every tree.
    pub fn initial_bandwidth(&self) -> f64 {
        self.fixed_bandwidth.unwrap_or(1.0 / self.bandwidth_rate)
    }

    /// Default leaf prior scale for the configured mode.
    pub fn sigma_mu(&self) -> f64 {
        match self.mode {
            Mode::Regression => 0.5 / self.k,
            Mode::Classification => 3.0 / self.k,
        }
    }

    /// Whether iteration `it` (0-based) is kept in the posterior.
    pub fn keeps(&self, it: usize) -> bool {
        it >= self.burn_in && (it - self.burn_in) % self.thin == 0
    }

    pub fn kept_count(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }

    /// Stable bytes of every setting that influences the chain.
    pub fn hash_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }
}
