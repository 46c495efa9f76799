use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::{Data, OrderStatistics};

use crate::data::DataShard;
use crate::error::{invalid, Result, SbartError};
use crate::problem::ResponseTransform;
use crate::tree::{Forest, SoftTree};

/// Partial residuals of tree `tree` given the cached fits of the whole
/// forest: `work - offset - fits + tree(x)` rowwise.
pub fn tree_residuals(shard: &DataShard, work: &[f64], offset: f64, fits: &[f64], tree: &SoftTree) -> Result<Vec<f64>> {
    if work.len() != shard.n() || fits.len() != shard.n() {
        return Err(SbartError::Consistency(format!(
            "fits cover {} rows, working response {}, shard {}",
            fits.len(),
            work.len(),
            shard.n()
        )));
    }
    let mut stack = Vec::with_capacity(8);
    Ok((0..shard.n())
        .map(|i| work[i] - offset - fits[i] + tree.predict_with(shard.row(i), &mut stack))
        .collect())
}

/// Posterior summaries per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Posterior mean of the regression function, or of the event
    /// probability in classification.
    pub mean: Vec<f64>,
    pub quantile_levels: Vec<f64>,
    /// `quantiles[i][q]` for row `i` and level `quantile_levels[q]`; empty for
    /// classification.
    pub quantiles: Vec<Vec<f64>>,
}

/// Summarizes the posterior at new rows `x` (row-major, already in the unit
/// cube).
pub fn predict_posterior(
    samples: &[Forest],
    x: &[f64],
    p: usize,
    transform: &ResponseTransform,
    offset: f64,
    levels: &[f64],
) -> Result<Prediction> {
    if samples.is_empty() {
        return invalid("no posterior samples to predict with");
    }
    if p == 0 || x.len() % p != 0 {
        return invalid("covariate matrix does not have p columns");
    }
    if levels.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return invalid("quantile levels must lie in [0, 1]");
    }
    let norm = Normal::standard();
    let k = samples.len() as f64;
    let classification = matches!(transform, ResponseTransform::Classification);
    let mut mean = Vec::with_capacity(x.len() / p);
    let mut quantiles = Vec::new();
    let mut draws = Vec::with_capacity(samples.len());
    for row in x.chunks_exact(p) {
        draws.clear();
        draws.extend(samples.iter().map(|f| offset + f.predict(row)));
        if classification {
            mean.push(draws.iter().map(|&f| norm.cdf(f)).sum::<f64>() / k);
        } else {
            let vals: Vec<f64> = draws.iter().map(|&f| transform.from_scaled(f)).collect();
            mean.push(vals.iter().sum::<f64>() / k);
            if !levels.is_empty() {
                let mut data = Data::new(vals);
                quantiles.push(levels.iter().map(|&q| data.quantile(q)).collect());
            }
        }
    }
    Ok(Prediction {
        mean,
        quantile_levels: if classification { Vec::new() } else { levels.to_vec() },
        quantiles,
    })
}
