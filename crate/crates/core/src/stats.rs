//! Null distributions and one-sided significance tests.
//!
//! Monte-Carlo nulls are drawn in fixed blocks of samples. Block `b` uses
//! its own generator seeded with `derive(seed, [b])`, so the samples do not
//! depend on how many threads run the blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::seeding::derive;

pub const DEFAULT_SAMPLES: usize = 100_000;
pub const ALPHA: f64 = 0.05;
const BLOCK: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullKind {
    BernoulliAccuracy,
    UniformCorrelation,
    BootstrapHuman,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NullSummary {
    pub kind: NullKind,
    /// Sorted ascending. Empty for the analytic Bernoulli null.
    pub samples: Vec<f64>,
    /// 95th percentile. For the Bernoulli null, the smallest attainable mean
    /// `a` with `P(mean ≥ a) ≤ 0.05`, or infinity when no such `a ≤ 1` exists.
    pub critical_value_95: f64,
    /// Number of images (Bernoulli, correlation) or raters (bootstrap).
    pub n: usize,
}

impl NullSummary {
    pub fn is_attainable(&self) -> bool {
        self.critical_value_95.is_finite()
    }

    pub fn mean(&self) -> f64 {
        match self.kind {
            NullKind::BernoulliAccuracy => 0.5,
            _ => self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64,
        }
    }
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n as u64).expect("valid binomial").sf(k as u64 - 1)
}

/// Exact null of the mean of `n` fair coin flips.
pub fn bernoulli_accuracy_null(n: usize) -> Result<NullSummary> {
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let critical = (0..=n)
        .find(|&k| binomial_tail(n, k) <= ALPHA)
        .map_or(f64::INFINITY, |k| k as f64 / n as f64);
    Ok(NullSummary { kind: NullKind::BernoulliAccuracy, samples: Vec::new(), critical_value_95: critical, n })
}

/// Nearest-rank 95th percentile of sorted samples.
fn percentile_95(sorted: &[f64]) -> f64 {
    let rank = (0.95 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn blocked_samples(n_samples: usize, seed: u64, draw: impl Fn(&mut ChaCha8Rng) -> f64 + Sync) -> Vec<f64> {
    let blocks = n_samples.div_ceil(BLOCK);
    let mut samples: Vec<f64> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[b as u64]));
            let len = BLOCK.min(n_samples - b * BLOCK);
            (0..len).map(|_| draw(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples
}

/// Correlations of `truth` with vectors of independent standard-uniform values.
pub fn uniform_correlation_null(truth: &[f64], n_samples: usize, seed: u64) -> Result<NullSummary> {
    let m = truth.len();
    if m < 3 {
        return Err(Error::UndefinedCorrelation(format!("{m} values")));
    }
    if n_samples == 0 {
        return Err(Error::EmptySet);
    }
    let mean = truth.iter().sum::<f64>() / m as f64;
    let centred: Vec<f64> = truth.iter().map(|t| t - mean).collect();
    let norm = centred.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedCorrelation("constant truth".into()));
    }
    let unit: Vec<f64> = centred.iter().map(|c| c / norm).collect();
    let samples = blocked_samples(n_samples, seed, |rng| {
        // The truth is centred, so Σ t·(u − ū) = Σ t·u.
        let (mut dot, mut s, mut ss) = (0.0, 0.0, 0.0);
        for &t in &unit {
            let u: f64 = rng.gen();
            dot += t * u;
            s += u;
            ss += u * u;
        }
        dot / (ss - s * s / m as f64).sqrt()
    });
    Ok(NullSummary { kind: NullKind::UniformCorrelation, critical_value_95: percentile_95(&samples), samples, n: m })
}

/// Means of rater scores resampled with replacement. Scores are sorted
/// first so the result does not depend on their order.
pub fn bootstrap_human(per_rater_scores: &[f64], n_samples: usize, seed: u64) -> Result<NullSummary> {
    if per_rater_scores.is_empty() || n_samples == 0 {
        return Err(Error::EmptySet);
    }
    let mut scores = per_rater_scores.to_vec();
    scores.sort_by(f64::total_cmp);
    let k = scores.len();
    let samples = blocked_samples(n_samples, seed, |rng| (0..k).map(|_| scores[rng.gen_range(0..k)]).sum::<f64>() / k as f64);
    Ok(NullSummary { kind: NullKind::BootstrapHuman, critical_value_95: percentile_95(&samples), samples, n: k })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestResult {
    pub p_value: f64,
    pub significant: bool,
    /// No null sample reached the observed value; `p_value` is the floor `1/n_samples`.
    pub at_floor: bool,
}

/// `P(null ≥ observed)`, treating the observed score as a constant.
pub fn one_sided_test(observed: f64, null: &NullSummary, alpha: f64) -> TestResult {
    let (p_value, at_floor) = match null.kind {
        NullKind::BernoulliAccuracy => {
            let n = null.n;
            // Smallest count whose mean reaches `observed`, guarding against rounding in `observed·n`.
            let k = (observed * n as f64 - 1e-9).ceil().max(0.0);
            if k > n as f64 {
                (0.0, false)
            } else {
                (binomial_tail(n, k as usize), false)
            }
        }
        _ => {
            let total = null.samples.len();
            let below = null.samples.partition_point(|&s| s < observed);
            let count = total - below;
            if count == 0 {
                (1.0 / total as f64, true)
            } else {
                (count as f64 / total as f64, false)
            }
        }
    };
    TestResult { p_value, significant: p_value < alpha, at_floor }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_critical_values() {
        let one = bernoulli_accuracy_null(1).unwrap();
        assert!(!one.is_attainable());
        let big = bernoulli_accuracy_null(2222).unwrap();
        let approx = 0.5 + 1.645 * 0.5 / (2222f64).sqrt();
        assert!((big.critical_value_95 - 0.5176).abs() < 5e-4, "{}", big.critical_value_95);
        assert!((big.critical_value_95 - approx).abs() / approx < 0.01);
        assert_eq!(big.mean(), 0.5);
    }

    #[test]
    fn binomial_tail_matches_direct_sum() {
        // n = 10: P(X ≥ 9) = 11/1024, P(X ≥ 8) = 56/1024.
        assert!((binomial_tail(10, 9) - 11.0 / 1024.0).abs() < 1e-12);
        assert!((binomial_tail(10, 8) - 56.0 / 1024.0).abs() < 1e-12);
        assert_eq!(binomial_tail(10, 11), 0.0);
        assert_eq!(bernoulli_accuracy_null(10).unwrap().critical_value_95, 0.9);
    }

    #[test]
    fn bernoulli_p_values() {
        let null = bernoulli_accuracy_null(10).unwrap();
        let r = one_sided_test(0.9, &null, ALPHA);
        assert!((r.p_value - 11.0 / 1024.0).abs() < 1e-12 && r.significant);
        let r = one_sided_test(0.3, &null, ALPHA);
        assert!(r.p_value > 0.5 && !r.significant);
        assert_eq!(one_sided_test(0.0, &null, ALPHA).p_value, 1.0);
    }

    #[test]
    fn uniform_null_is_centred_and_reproducible() {
        let truth: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = uniform_correlation_null(&truth, 20_000, 3).unwrap();
        let b = uniform_correlation_null(&truth, 20_000, 3).unwrap();
        assert_eq!(a, b);
        let sd = (a.samples.iter().map(|s| s * s).sum::<f64>() / a.samples.len() as f64).sqrt();
        assert!(a.mean().abs() < 3.0 * sd / (a.samples.len() as f64).sqrt());
        assert!(matches!(uniform_correlation_null(&[1.0; 5], 10, 0), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn bootstrap_examples() {
        let point = bootstrap_human(&[0.7; 4], 500, 1).unwrap();
        assert!(point.samples.iter().all(|&s| (s - 0.7).abs() < 1e-12));

        let pair = bootstrap_human(&[0.0, 1.0], 40_000, 2).unwrap();
        let frac = |v: f64| pair.samples.iter().filter(|&&s| s == v).count() as f64 / 40_000.0;
        for (v, p) in [(0.0, 0.25), (0.5, 0.5), (1.0, 0.25)] {
            // Three binomial standard errors.
            assert!((frac(v) - p).abs() < 3.0 * (p * (1.0 - p) / 40_000.0).sqrt(), "{v}: {}", frac(v));
        }

        let scores = [0.61, 0.72, 0.55, 0.8, 0.66];
        let boot = bootstrap_human(&scores, 20_000, 5).unwrap();
        let mean = scores.iter().sum::<f64>() / 5.0;
        let se = (boot.samples.iter().map(|s| (s - boot.mean()).powi(2)).sum::<f64>() / 20_000.0).sqrt();
        assert!((boot.mean() - mean).abs() < 3.0 * se);
        let shuffled = bootstrap_human(&[0.8, 0.55, 0.66, 0.61, 0.72], 20_000, 5).unwrap();
        assert_eq!(boot, shuffled);
    }

    #[test]
    fn empirical_p_values() {
        let null = bootstrap_human(&[0.2, 0.4, 0.6], 1000, 0).unwrap();
        let median = null.samples[500];
        assert!(one_sided_test(median - 0.05, &null, ALPHA).p_value > 0.5);
        let top = one_sided_test(0.99, &null, ALPHA);
        assert!(top.at_floor && top.p_value == 1e-3 && top.significant);
        let mut last = 1.0;
        for i in 0..=20 {
            let p = one_sided_test(i as f64 * 0.05, &null, ALPHA).p_value;
            assert!((0.0..=1.0).contains(&p) && p <= last);
            last = p;
        }
    }
}
