//! Expected extra sparsity from double pruning.
//!
//! After a random row-wise N:M mask, the survivors in each column group of
//! `m` rows are `Binomial(m, n/m)`; the second pass removes every survivor
//! past the `n`-th. [`lemma1_analytic`] evaluates that expectation in closed
//! form and [`lemma1_monte_carlo`] measures it on random matrices.

use rayon::prelude::*;

use crate::dense::DenseMatrix;
use crate::error::Result;
use crate::nm::mask::{double_prune, NmMask};
use crate::nm::pattern::{binomial, NmPattern};
use crate::rng::{derive_seed, rng_from_seed};

/// `sum_{j=n+1}^{m} C(m, j) s^j (1-s)^(m-j) (j - n) / m` with `s = n / m`:
/// the expected density lost when a random row-pruned matrix is pruned again
/// along columns.
pub fn lemma1_analytic(pattern: NmPattern) -> f64 {
    let (n, m) = (pattern.n(), pattern.m());
    let s = pattern.density();
    ((n + 1)..=m)
        .map(|j| {
            binomial(m, j) as f64
                * s.powi(j as i32)
                * (1.0 - s).powi((m - j) as i32)
                * (j - n) as f64
                / m as f64
        })
        .sum()
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl MonteCarloEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let trials = samples.len();
        if trials == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                trials,
            };
        }
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let std_error = if trials > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
            (var / trials as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_error,
            trials,
        }
    }

    /// `|mean - reference| / std_error` (infinite if the error is zero and
    /// the means differ).
    pub fn z_score(&self, reference: f64) -> f64 {
        let diff = (self.mean - reference).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.std_error
        }
    }
}

/// Density drop of one random trial: a `side x side` standard normal matrix,
/// a uniformly random row-wise mask, then double pruning.
pub fn density_drop_trial(pattern: NmPattern, side: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let dense = DenseMatrix::<f32>::random_normal(side, side, 1.0, &mut rng);
    let row_mask = NmMask::random_with(side, side, pattern, &mut rng)?;
    let pruned = double_prune(&dense, &row_mask, pattern)?;
    Ok(row_mask.density() - pruned.density())
}

/// Averages [`density_drop_trial`] over `trials` independent draws. Trial
/// `i` uses sub-seed `derive_seed(seed, i)`, so the estimate is the same for
/// any thread count.
pub fn lemma1_monte_carlo(
    pattern: NmPattern,
    side_len: usize,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    pattern.check_divisible(side_len)?;
    let samples = (0..trials)
        .into_par_iter()
        .map(|i| density_drop_trial(pattern, side_len, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MonteCarloEstimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, m: usize) -> NmPattern {
        NmPattern::new(n, m).unwrap()
    }

    /// Expectation by enumerating all 2^m survivor patterns of a column group.
    fn enumerated(pattern: NmPattern) -> f64 {
        let (n, m) = (pattern.n(), pattern.m());
        let s = pattern.density();
        (0u32..(1 << m))
            .map(|bits| {
                let y = bits.count_ones() as usize;
                let prob = s.powi(y as i32) * (1.0 - s).powi((m - y) as i32);
                prob * y.saturating_sub(n) as f64 / m as f64
            })
            .sum()
    }

    #[test]
    fn closed_form_matches_enumeration() {
        for pat in [p(1, 2), p(2, 4), p(2, 8), p(4, 8), p(1, 4), p(3, 8)] {
            assert!((lemma1_analytic(pat) - enumerated(pat)).abs() < 1e-15, "{pat}");
        }
    }

    #[test]
    fn known_values() {
        assert_eq!(lemma1_analytic(p(1, 2)), 0.125);
        assert_eq!(lemma1_analytic(p(2, 4)), 0.09375);
        assert_eq!(lemma1_analytic(p(4, 4)), 0.0);
        // exact rational value 30618 / (8 * 4^8)
        assert!((lemma1_analytic(p(2, 8)) - 30618.0 / 524288.0).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let a = lemma1_monte_carlo(p(2, 4), 64, 1, 9).unwrap();
        let b = lemma1_monte_carlo(p(2, 4), 64, 1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.std_error, 0.0);
        assert!(lemma1_monte_carlo(p(2, 4), 66, 1, 9).is_err());
    }

    #[test]
    fn monte_carlo_small_agrees() {
        for pat in [p(1, 2), p(2, 4)] {
            let est = lemma1_monte_carlo(pat, 128, 40, 3).unwrap();
            assert!(est.z_score(lemma1_analytic(pat)) < 4.0, "{pat}: {est:?}");
        }
    }
}
