//! Truncated-normal latent variables for probit classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{invalid, Result};

/// Generator for the latent variable of global row `row` in the refresh
/// identified by `seed`. Keying on the global row keeps the draws identical
/// however the rows are sharded.
pub fn latent_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Standard normal truncated to `[a, inf)`.
fn standard_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a < 0.45 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= a {
                return z;
            }
        }
    }
    // Exponential proposal with the optimal rate for this bound.
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        let u: f64 = rng.random();
        if u <= (-0.5 * (z - rate) * (z - rate)).exp() {
            return z;
        }
    }
}

/// `N(mean, 1)` truncated to `(0, inf)` when `positive`, else to `(-inf, 0]`.
pub fn draw_truncated_normal<R: Rng + ?Sized>(mean: f64, positive: bool, rng: &mut R) -> f64 {
    if positive {
        let z = mean + standard_tail(-mean, rng);
        // Guard the boundary against rounding.
        if z > 0.0 {
            z
        } else {
            f64::MIN_POSITIVE
        }
    } else {
        (mean - standard_tail(mean, rng)).min(0.0)
    }
}

/// Draws one latent value per row given the current means and 0/1 labels.
/// Row `i` uses the stream of global row `first_row + i`.
pub fn draw_latent_classification(means: &[f64], labels: &[f64], seed: u64, first_row: usize) -> Result<Vec<f64>> {
    if means.len() != labels.len() {
        return invalid("means and labels differ in length");
    }
    means
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&m, &y))| {
            if y != 0.0 && y != 1.0 {
                return invalid(format!("label {y} at row {} is not 0 or 1", first_row + i + 1));
            }
            let mut rng = latent_rng(seed, first_row + i);
            Ok(draw_truncated_normal(m, y == 1.0, &mut rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_at_zero_is_half_normal_mean() {
        let n = 200_000;
        let draws = draw_latent_classification(&vec![0.0; n], &vec![1.0; n], 7, 0).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let want = (2.0 / std::f64::consts::PI).sqrt();
        // sd of the half normal is about 0.603
        assert!((mean - want).abs() < 4.0 * 0.603 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn far_mean_leaves_truncation_inactive() {
        let mut rng = latent_rng(1, 0);
        let n = 20_000;
        let mean = (0..n).map(|_| draw_truncated_normal(8.0, true, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 8.0).abs() < 0.05);
    }

    #[test]
    fn tail_sampler_matches_truncated_mean() {
        // E[Z | Z > a] = pdf(a) / (1 - cdf(a)) for a standard normal.
        use statrs::distribution::{Continuous, ContinuousCDF, Normal};
        let norm = Normal::standard();
        let mut rng = latent_rng(2, 0);
        for a in [-1.0, 0.3, 1.0, 3.0] {
            let n = 100_000;
            let mean = (0..n).map(|_| standard_tail(a, &mut rng)).sum::<f64>() / n as f64;
            let want = norm.pdf(a) / (1.0 - norm.cdf(a));
            assert!((mean - want).abs() < 0.01, "a = {a}: {mean} vs {want}");
        }
    }

    #[test]
    fn signs_follow_labels() {
        let means: Vec<f64> = (0..2000).map(|i| (i as f64 - 1000.0) / 100.0).collect();
        let labels: Vec<f64> = (0..2000).map(|i| (i % 2) as f64).collect();
        let z = draw_latent_classification(&means, &labels, 3, 0).unwrap();
        for (v, y) in z.iter().zip(&labels) {
            assert_eq!(*v > 0.0, *y == 1.0);
        }
        assert!(draw_latent_classification(&[0.0], &[2.0], 3, 0).is_err());
    }

    #[test]
    fn draws_do_not_depend_on_sharding() {
        let means: Vec<f64> = (0..30).map(|i| i as f64 / 10.0 - 1.5).collect();
        let labels: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let whole = draw_latent_classification(&means, &labels, 11, 0).unwrap();
        let mut parts = draw_latent_classification(&means[..13], &labels[..13], 11, 0).unwrap();
        parts.extend(draw_latent_classification(&means[13..], &labels[13..], 11, 13).unwrap());
        assert_eq!(whole, parts);
    }
}
