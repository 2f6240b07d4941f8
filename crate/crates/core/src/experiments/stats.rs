//! Small statistics helpers: least squares, bootstrap, Wilson intervals.

use rand::Rng;

/// Ordinary least squares `y = intercept + slope x`; `None` if x has no spread.
pub fn ols(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Percentile bootstrap interval for the pooled OLS slope, resampling whole groups.
pub fn bootstrap_slope<R: Rng + ?Sized>(
    groups: &[Vec<(f64, f64)>],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> Option<(f64, f64)> {
    if groups.is_empty() || resamples == 0 {
        return None;
    }
    let mut slopes = Vec::with_capacity(resamples);
    let mut pool = Vec::new();
    for _ in 0..resamples {
        pool.clear();
        for _ in 0..groups.len() {
            pool.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
        }
        if let Some((s, _)) = ols(&pool) {
            slopes.push(s);
        }
    }
    if slopes.is_empty() {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Some((percentile(&slopes, tail), percentile(&slopes, 1.0 - tail)))
}

/// Linear-interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Wilson score interval for a binomial proportion at normal quantile `z`.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn ols_recovers_exact_line() {
        let pts: Vec<_> = (0..5).map(|i| (i as f64, 2.0 + 0.5 * i as f64)).collect();
        let (s, b) = ols(&pts).unwrap();
        assert!((s - 0.5).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert!(ols(&[(1.0, 1.0), (1.0, 2.0)]).is_none());
    }

    #[test]
    fn bootstrap_of_noiseless_groups_is_a_point() {
        let groups: Vec<Vec<_>> = (0..4)
            .map(|_| (1..4).map(|i| (i as f64, 3.0 * i as f64)).collect())
            .collect();
        let (lo, hi) = bootstrap_slope(&groups, 50, 0.95, &mut seeded(1)).unwrap();
        assert!((lo - 3.0).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn wilson_matches_known_values() {
        // 0 of 10 at z = 1.96: upper end z^2 / (n + z^2).
        let (lo, hi) = wilson(0, 10, 1.96);
        assert_eq!(lo, 0.0);
        assert!((hi - 1.96f64.powi(2) / (10.0 + 1.96f64.powi(2))).abs() < 1e-12);
        let (lo, hi) = wilson(50, 100, 1.96);
        assert!((lo + hi - 1.0).abs() < 1e-12 && lo > 0.39 && hi < 0.61);
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&xs, 0.5), 1.5);
        assert_eq!(percentile(&xs, 1.0), 3.0);
    }
}
