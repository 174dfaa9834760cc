//! Small statistics used by the evaluation gates.

use alloc::vec::Vec;

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = alloc::vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / libm::sqrt(sxx * syy)
}

/// Spearman rank correlation (Pearson on average ranks). Zero when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Wilson score interval for `k` successes out of `n` at normal quantile `z`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * libm::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn ln_choose(n: usize, k: usize) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// Exact one-sided sign test on paired binary outcomes: `wins` pairs where
/// only the first method succeeded, `losses` where only the second did.
/// Returns P(X ≥ wins) for X ~ Binomial(wins + losses, 1/2).
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let ln_half_n = n as f64 * libm::log(0.5);
    let mut p = 0.0;
    for k in wins..=n {
        p += libm::exp(ln_choose(n, k) + ln_half_n);
    }
    p.min(1.0)
}

/// Paired comparison of two outcome vectors over the same seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedComparison {
    pub n: usize,
    pub rate_a: f64,
    pub rate_b: f64,
    /// Pairs where only `a` succeeded.
    pub wins: usize,
    /// Pairs where only `b` succeeded.
    pub losses: usize,
    /// One-sided p-value for "a better than b".
    pub p_value: f64,
}

pub fn paired(a: &[bool], b: &[bool]) -> PairedComparison {
    assert_eq!(a.len(), b.len(), "paired comparison needs equal lengths");
    let n = a.len();
    let wins = a.iter().zip(b).filter(|(x, y)| **x && !**y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| !**x && **y).count();
    let rate = |v: &[bool]| {
        if n == 0 {
            0.0
        } else {
            v.iter().filter(|x| **x).count() as f64 / n as f64
        }
    };
    PairedComparison {
        n,
        rate_a: rate(a),
        rate_b: rate(b),
        wins,
        losses,
        p_value: sign_test_p(wins, losses),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), alloc::vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_extremes() {
        let x = [0.0, 0.1, 0.2, 0.3];
        assert!((spearman(&x, &[0.9, 0.7, 0.5, 0.1]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 2.0, 3.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0; 4]), 0.0);
    }

    #[test]
    fn sign_test_known_values() {
        // P(X >= 9 | n = 10) = 11/1024
        assert!((sign_test_p(9, 1) - 11.0 / 1024.0).abs() < 1e-12);
        assert!((sign_test_p(0, 4) - 1.0).abs() < 1e-12);
        assert_eq!(sign_test_p(0, 0), 1.0);
    }

    #[test]
    fn wilson_contains_rate() {
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && hi > 0.5);
        assert!((hi - lo - 0.192).abs() < 0.01);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
