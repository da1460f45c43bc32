//! Small statistics helpers for the experiment checks.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Bins whose pooled count falls below this are merged into one.
const MIN_POOLED_COUNT: u64 = 10;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with Bessel's correction.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of `mean(a) - mean(b)` for independent samples.
pub fn pooled_standard_error(a: &[f64], b: &[f64]) -> f64 {
    (sample_variance(a) / a.len() as f64 + sample_variance(b) / b.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Two-sample chi-square homogeneity test over two histograms.
///
/// Sparse bins are pooled so every remaining bin has a combined count of at
/// least ten.
pub fn two_sample_chi_square<K: Ord + Clone>(a: &BTreeMap<K, u64>, b: &BTreeMap<K, u64>) -> ChiSquareResult {
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut bins: Vec<(u64, u64)> = Vec::new();
    let mut pooled = (0u64, 0u64);
    for k in keys {
        let pair = (a.get(k).copied().unwrap_or(0), b.get(k).copied().unwrap_or(0));
        if pair.0 + pair.1 < MIN_POOLED_COUNT {
            pooled.0 += pair.0;
            pooled.1 += pair.1;
        } else {
            bins.push(pair);
        }
    }
    if pooled.0 + pooled.1 > 0 {
        bins.push(pooled);
    }
    let na: u64 = bins.iter().map(|b| b.0).sum();
    let nb: u64 = bins.iter().map(|b| b.1).sum();
    let (ka, kb) = ((nb as f64 / na as f64).sqrt(), (na as f64 / nb as f64).sqrt());
    let statistic: f64 = bins
        .iter()
        .map(|&(x, y)| (ka * x as f64 - kb * y as f64).powi(2) / (x + y) as f64)
        .sum();
    let dof = bins.len().saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        1.0 - ChiSquared::new(dof as f64).expect("positive degrees of freedom").cdf(statistic)
    };
    ChiSquareResult { statistic, dof, p_value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_histograms_have_zero_statistic() {
        let h: BTreeMap<u32, u64> = [(0, 100), (1, 50), (2, 3)].into_iter().collect();
        let r = two_sample_chi_square(&h, &h);
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn different_histograms_are_detected() {
        let a: BTreeMap<u32, u64> = [(0, 1000), (1, 1000)].into_iter().collect();
        let b: BTreeMap<u32, u64> = [(0, 1200), (1, 800)].into_iter().collect();
        assert!(two_sample_chi_square(&a, &b).p_value < 1e-6);
    }

    #[test]
    fn standard_error() {
        assert_eq!(sample_variance(&[1.0, 3.0]), 2.0);
        assert!((pooled_standard_error(&[1.0, 3.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
