//! Prior distributions and their direct draws.
//!
//! The tree prior is the usual branching process: a node at depth `d` splits
//! with probability `alpha / (1 + d)^beta`. Split variables follow a sparse
//! Dirichlet whose concentration moves on a fixed grid, leaf values are
//! conjugate normal, the noise variance is scaled-inverse-chi-squared, and
//! each tree's bandwidth is exponential.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp, Gamma};
use statrs::distribution::{ChiSquared as ChiSquaredDist, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};
use crate::tree::SoftTree;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeShapePrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TreeShapePrior {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            beta: 2.0,
        }
    }
}

impl TreeShapePrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {alpha}"));
        }
        if !(beta >= 0.0) {
            return invalid(format!("beta must be nonnegative, got {beta}"));
        }
        Ok(Self { alpha, beta })
    }

    pub fn split_probability(&self, depth: usize) -> f64 {
        self.alpha / (1.0 + depth as f64).powf(self.beta)
    }

    /// Log prior probability of the tree's shape.
    pub fn log_tree_prior(&self, tree: &SoftTree) -> f64 {
        tree.nodes()
            .iter()
            .zip(tree.depths())
            .map(|(node, d)| {
                let ps = self.split_probability(d);
                if node.is_leaf() {
                    (1.0 - ps).ln()
                } else {
                    ps.ln()
                }
            })
            .sum()
    }
}

/// Scaled-inverse-chi-squared prior `sigma^2 ~ nu * lambda / chi^2_nu`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoisePrior {
    pub nu: f64,
    pub lambda: f64,
}

impl NoisePrior {
    pub fn new(nu: f64, lambda: f64) -> Result<Self> {
        if !(nu > 0.0) || !(lambda > 0.0) {
            return invalid(format!("noise prior needs nu > 0 and lambda > 0 (got {nu}, {lambda})"));
        }
        Ok(Self { nu, lambda })
    }

    /// Chooses `lambda` so that `P(sigma^2 < variance) = quantile`.
    pub fn calibrated(nu: f64, variance: f64, quantile: f64) -> Result<Self> {
        if !(quantile > 0.0 && quantile < 1.0) {
            return invalid(format!("calibration quantile must lie in (0, 1), got {quantile}"));
        }
        if !(variance > 0.0) {
            return invalid(format!("response variance must be positive, got {variance}"));
        }
        let chi = ChiSquaredDist::new(nu).map_err(|e| crate::SbartError::InvalidArgument(e.to_string()))?;
        let c = chi.inverse_cdf(1.0 - quantile);
        Self::new(nu, variance * c / nu)
    }
}

/// Draws `sigma^2 | residuals` with `residual_ss = sum of squared residuals`
/// over `n` observations.
pub fn draw_sigma_squared<R: Rng + ?Sized>(residual_ss: f64, n: u64, prior: &NoisePrior, rng: &mut R) -> f64 {
    let df = prior.nu + n as f64;
    let chi = ChiSquared::new(df).expect("positive degrees of freedom");
    let draw: f64 = chi.sample(rng);
    (prior.nu * prior.lambda + residual_ss.max(0.0)) / draw.max(f64::MIN_POSITIVE)
}

/// Draws split-variable probabilities from `Dirichlet(a/p + counts)`.
///
/// Small shapes make gamma draws underflow, so the draw is carried out in log
/// space with `G(k) = G(k + 1) * U^(1/k)`.
pub fn draw_split_probs<R: Rng + ?Sized>(counts: &[u64], concentration: f64, rng: &mut R) -> Vec<f64> {
    let p = counts.len();
    let base = concentration / p as f64;
    let logs: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let shape = base + c as f64;
            let g = Gamma::new(shape + 1.0, 1.0).expect("positive shape");
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let gv: f64 = g.sample(rng);
            gv.ln() + u.ln() / shape
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Discrete grid for the Dirichlet concentration, moved by Metropolis steps
/// to neighbouring grid points under a uniform prior on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcentrationGrid {
    pub points: Vec<f64>,
}

impl ConcentrationGrid {
    /// Grid `multipliers * p`.
    pub fn scaled(multipliers: &[f64], p: usize) -> Result<Self> {
        if multipliers.is_empty() || multipliers.iter().any(|&m| !(m > 0.0)) {
            return invalid("concentration grid must be non-empty and positive");
        }
        Ok(Self {
            points: multipliers.iter().map(|m| m * p as f64).collect(),
        })
    }

    /// Log density of `Dirichlet(a/p, ..., a/p)` at `s`, up to the grid prior.
    pub fn log_posterior(&self, a: f64, s: &[f64]) -> f64 {
        let p = s.len() as f64;
        let sum_log: f64 = s.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).sum();
        ln_gamma(a) - p * ln_gamma(a / p) + (a / p - 1.0) * sum_log
    }

    fn neighbours(&self, i: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(2);
        if i > 0 {
            v.push(i - 1);
        }
        if i + 1 < self.points.len() {
            v.push(i + 1);
        }
        v
    }

    /// One Metropolis step from grid index `current`; returns the new index.
    pub fn step<R: Rng + ?Sized>(&self, current: usize, s: &[f64], rng: &mut R) -> usize {
        let from = self.neighbours(current);
        if from.is_empty() {
            return current;
        }
        let proposal = from[rng.random_range(0..from.len())];
        let back = self.neighbours(proposal).len();
        let log_ratio = self.log_posterior(self.points[proposal], s) - self.log_posterior(self.points[current], s)
            + (from.len() as f64).ln()
            - (back as f64).ln();
        let u: f64 = rng.random();
        if u.ln() < log_ratio {
            proposal
        } else {
            current
        }
    }
}

/// Exponential prior on a tree's bandwidth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandwidthPrior {
    pub rate: f64,
}

impl BandwidthPrior {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return invalid(format!("bandwidth rate must be positive, got {rate}"));
        }
        Ok(Self { rate })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e = Exp::new(self.rate).expect("positive rate");
        // An exact zero is not a valid bandwidth.
        e.sample(rng).max(f64::MIN_POSITIVE)
    }

    pub fn log_density(&self, tau: f64) -> f64 {
        self.rate.ln() - self.rate * tau
    }

    pub fn mean(&self) -> f64 {
        1.0 / self.rate
    }
}

/// Normal prior on leaf values. The sum of `m` independent leaves has variance
/// `sigma_mu^2`, so each leaf has variance `sigma_mu^2 / m`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LeafPrior {
    pub mu_mu: f64,
    pub sigma_mu: f64,
}

impl LeafPrior {
    pub fn new(sigma_mu: f64) -> Result<Self> {
        if !(sigma_mu > 0.0) {
            return invalid(format!("sigma_mu must be positive, got {sigma_mu}"));
        }
        Ok(Self { mu_mu: 0.0, sigma_mu })
    }

    pub fn leaf_variance(&self, m: usize) -> f64 {
        self.sigma_mu * self.sigma_mu / m as f64
    }
}

/// Metropolis update of `sigma_mu` under a half-Cauchy prior with the given
/// scale, using a random walk on `ln sigma_mu`.
pub fn update_sigma_mu<R: Rng + ?Sized>(current: f64, leaves: &[f64], m: usize, scale: f64, rng: &mut R) -> f64 {
    let log_target = |s: f64| -> f64 {
        let var = s * s / m as f64;
        let ss: f64 = leaves.iter().map(|v| v * v).sum();
        let lik = -0.5 * leaves.len() as f64 * var.ln() - ss / (2.0 * var);
        let prior = -(1.0 + (s / scale).powi(2)).ln();
        // Jacobian of the log-scale walk.
        lik + prior + s.ln()
    };
    let z: f64 = rand_distr::StandardNormal.sample(rng);
    let proposal = current * (0.1 * z).exp();
    let u: f64 = rng.random();
    if u.ln() < log_target(proposal) - log_target(current) {
        proposal
    } else {
        current
    }
}
