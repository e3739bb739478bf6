//! Monte Carlo permutation tests with exact binomial (Clopper-Pearson)
//! bounds on the estimated p-value, plus the Pearson correlation used by
//! the evaluation reports.

use super::{CoordError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Tail {
    One,
    Two,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TestReport {
    pub p_value: f64,
    /// 99% Clopper-Pearson bounds on the true exceedance probability.
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
    pub tail: Tail,
    pub observed_stat: f64,
}

/// Exact binomial confidence bounds for `hits` successes in `n` trials at
/// confidence `1 - alpha`.
pub fn clopper_pearson(hits: usize, n: usize, alpha: f64) -> (f64, f64) {
    assert!(n > 0 && hits <= n);
    let lower = if hits == 0 {
        0.0
    } else {
        Beta::new(hits as f64, (n - hits + 1) as f64)
            .unwrap()
            .inverse_cdf(alpha / 2.0)
    };
    let upper = if hits == n {
        1.0
    } else {
        Beta::new((hits + 1) as f64, (n - hits) as f64)
            .unwrap()
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lower, upper)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Difference-of-means permutation test: pooled scores are randomly
/// reassigned to the two groups `resamples` times; the add-one estimator
/// p = (1 + hits) / (1 + resamples) is reported with 99% Clopper-Pearson
/// bounds derived from the hit count.
pub fn permutation_test(
    scores_a: &[f64],
    scores_b: &[f64],
    resamples: usize,
    tail: Tail,
    seed: u64,
) -> Result<TestReport> {
    if scores_a.is_empty() || scores_b.is_empty() {
        return Err(CoordError::Contract(
            "permutation test needs nonempty score lists".into(),
        ));
    }
    if resamples < 1 {
        return Err(CoordError::Contract("resamples must be >= 1".into()));
    }
    let observed = mean(scores_a) - mean(scores_b);
    let mut pooled: Vec<f64> = scores_a.iter().chain(scores_b.iter()).copied().collect();
    let na = scores_a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    let mut hits = 0usize;
    for _ in 0..resamples {
        pooled.shuffle(&mut rng);
        let stat = mean(&pooled[..na]) - mean(&pooled[na..]);
        let hit = match tail {
            Tail::One => stat >= observed,
            Tail::Two => stat.abs() >= observed.abs(),
        };
        if hit {
            hits += 1;
        }
    }
    let p_value = (1 + hits) as f64 / (1 + resamples) as f64;
    let (lo, hi) = clopper_pearson(hits, resamples, 0.01);
    Ok(TestReport {
        p_value,
        lower: lo.min(p_value),
        upper: hi.max(p_value),
        resamples,
        tail,
        observed_stat: observed,
    })
}

/// Pearson correlation coefficient; errors on fewer than 3 points or a
/// degenerate (zero-variance) axis.
pub fn pearson_r(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(CoordError::Contract(
            "pearson_r needs at least 3 points".into(),
        ));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoordError::Contract(
            "pearson_r undefined for a constant axis".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
