//! Per-user evaluation statistics, undefined-value accounting and bootstrap
//! resampling.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Spearman,
    RSquared,
}

/// A statistic that may be undefined (e.g. a correlation with a constant
/// vector).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: Option<f64>,
}

impl MetricValue {
    pub fn defined(kind: MetricKind, value: f64) -> Self {
        Self {
            kind,
            value: Some(value),
        }
    }

    pub fn undefined(kind: MetricKind) -> Self {
        Self { kind, value: None }
    }

    pub fn is_defined(&self) -> bool {
        self.value.is_some()
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 paired values, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::validation("values", "must be finite"));
    }
    Ok(())
}

fn all_equal(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// 1-based ranks with ties sharing their average rank. The flag reports
/// whether any tie occurred.
pub fn average_ranks(values: &[f64]) -> (Vec<f64>, bool) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut tied = false;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            tied = true;
        }
        // Positions start..end hold ranks start+1..=end.
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    (ranks, tied)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman's ρ. Ties get average ranks and ρ is the Pearson correlation of
/// the rank vectors; without ties this is evaluated as `1 − 6Σd²/(n(n²−1))`.
/// Undefined when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<MetricValue> {
    check_pair(a, b)?;
    if all_equal(a) || all_equal(b) {
        return Ok(MetricValue::undefined(MetricKind::Spearman));
    }
    let (ra, tied_a) = average_ranks(a);
    let (rb, tied_b) = average_ranks(b);
    let rho = if tied_a || tied_b {
        pearson(&ra, &rb)
    } else {
        let n = a.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    };
    Ok(MetricValue::defined(MetricKind::Spearman, rho.clamp(-1.0, 1.0)))
}

/// Coefficient of determination against the mean of `y_true`. Undefined when
/// `y_true` is constant; may be negative.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<MetricValue> {
    check_pair(y_true, y_pred)?;
    if all_equal(y_true) {
        return Ok(MetricValue::undefined(MetricKind::RSquared));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p) * (y - p)).sum();
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    Ok(MetricValue::defined(MetricKind::RSquared, 1.0 - ss_res / ss_tot))
}

/// Evaluation of one user's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEvalRecord {
    pub user_id: String,
    pub rho: MetricValue,
    pub r2: MetricValue,
    pub n_test: usize,
}

impl UserEvalRecord {
    pub fn evaluate(user_id: &str, y_true: &[f64], y_pred: &[f64]) -> Result<Self> {
        Ok(Self {
            user_id: user_id.to_string(),
            rho: spearman(y_true, y_pred)?,
            r2: r_squared(y_true, y_pred)?,
            n_test: y_true.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean_rho: Option<f64>,
    pub mean_r2: Option<f64>,
    pub n_users_total: usize,
    pub n_rho_undefined: usize,
    pub n_r2_undefined: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut count, mut undefined) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                count += 1;
            }
            None => undefined += 1,
        }
    }
    ((count > 0).then(|| sum / count as f64), undefined)
}

/// User-averaged metrics; users with an undefined value are left out of
/// that metric's mean and counted instead.
pub fn aggregate(records: &[UserEvalRecord]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::Insufficient("no user records to aggregate".into()));
    }
    let (mean_rho, n_rho_undefined) = mean_defined(records.iter().map(|r| r.rho.value));
    let (mean_r2, n_r2_undefined) = mean_defined(records.iter().map(|r| r.r2.value));
    Ok(AggregateReport {
        mean_rho,
        mean_r2,
        n_users_total: records.len(),
        n_rho_undefined,
        n_r2_undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub point_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    /// Fraction of resamples with `mean(baseline) − mean(candidate) > 0`.
    pub p_delta_positive: f64,
    /// `mean(baseline) − mean(candidate)` on the original users.
    pub point_delta: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Indices of resample `r`: `n` uniform draws with replacement from
/// `0..n`, taken from stream `r` of the seeded generator.
pub fn resample_indices(seed: u64, r: usize, n: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, r as u64);
    (0..n).map(|_| rng.random_range(0..n as u32) as usize).collect()
}

// Means are taken relative to values[0] so constant inputs come back exact.
fn mean_at(values: &[f64], idx: &[usize]) -> f64 {
    let shift = values[0];
    shift + idx.iter().map(|&i| values[i] - shift).sum::<f64>() / idx.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    let shift = values[0];
    shift + values.iter().map(|v| v - shift).sum::<f64>() / values.len() as f64
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

fn check_values(values: &[f64], n_resamples: usize) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Insufficient("bootstrap needs at least one value".into()));
    }
    if values.len() > u32::MAX as usize {
        return Err(Error::validation("values", "too many values"));
    }
    if n_resamples == 0 {
        return Err(Error::validation("n_resamples", "must be at least 1"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("values", "must be finite"));
    }
    Ok(())
}

/// Means of each bootstrap resample, in resample order.
pub fn resample_means(values: &[f64], n_resamples: usize, seed: u64) -> Vec<f64> {
    (0..n_resamples)
        .into_par_iter()
        .map(|r| mean_at(values, &resample_indices(seed, r, values.len())))
        .collect()
}

/// Percentile confidence interval for the mean of `values`.
pub fn bootstrap_ci(
    values: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapReport> {
    check_values(values, n_resamples)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::validation("level", "must lie strictly between 0 and 1"));
    }
    let mut means = resample_means(values, n_resamples, seed);
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapReport {
        point_mean: mean(values),
        ci_low: quantile_sorted(&means, tail),
        ci_high: quantile_sorted(&means, 1.0 - tail),
        n_resamples,
        level,
        seed,
    })
}

/// Paired bootstrap: each resample draws one index set applied to both
/// vectors. Ties (Δ = 0) count as non-positive.
pub fn bootstrap_compare(
    baseline: &[f64],
    candidate: &[f64],
    n_resamples: usize,
    seed: u64,
) -> Result<CompareReport> {
    if baseline.len() != candidate.len() {
        return Err(Error::Dimension {
            expected: baseline.len(),
            found: candidate.len(),
        });
    }
    check_values(baseline, n_resamples)?;
    check_values(candidate, n_resamples)?;
    let n = baseline.len();
    let positive = (0..n_resamples)
        .into_par_iter()
        .filter(|&r| {
            let idx = resample_indices(seed, r, n);
            mean_at(baseline, &idx) - mean_at(candidate, &idx) > 0.0
        })
        .count();
    Ok(CompareReport {
        p_delta_positive: positive as f64 / n_resamples as f64,
        point_delta: mean(baseline) - mean(candidate),
        n_resamples,
        seed,
    })
}

/// Orders optional metric values with undefined last.
pub fn cmp_defined_first(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rho(a: &[f64], b: &[f64]) -> Option<f64> {
        spearman(a, b).unwrap().value
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(rho(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]), None);
        // Σd² = 2 → 1 − 12/60
        assert_eq!(rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]), Some(0.8));
        assert_eq!(rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0]), Err(Error::Dimension { .. })));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::Insufficient(_))));
        assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_ties() {
        let (r, tied) = average_ranks(&[10.0, 20.0, 10.0, 30.0, 20.0, 20.0]);
        assert!(tied);
        assert_eq!(r, vec![1.5, 4.0, 1.5, 6.0, 4.0, 4.0]);
        let (r, tied) = average_ranks(&[3.0, 1.0, 2.0]);
        assert!(!tied);
        assert_eq!(r, vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap().value, Some(1.0));
        assert_eq!(r_squared(&y, &[2.0, 2.0, 2.0]).unwrap().value, Some(0.0));
        assert_eq!(r_squared(&y, &[1.0, 2.0, 5.0]).unwrap().value, Some(-1.0));
        assert_eq!(r_squared(&[2.0, 2.0], &[1.0, 3.0]).unwrap().value, None);
        assert!(r_squared(&y, &[1.0]).is_err());
    }

    fn record(id: &str, rho: Option<f64>, r2: Option<f64>) -> UserEvalRecord {
        UserEvalRecord {
            user_id: id.into(),
            rho: MetricValue {
                kind: MetricKind::Spearman,
                value: rho,
            },
            r2: MetricValue {
                kind: MetricKind::RSquared,
                value: r2,
            },
            n_test: 50,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[record("a", Some(0.5), Some(0.1))]).unwrap();
        assert_eq!(one.mean_rho, Some(0.5));
        assert_eq!(one.n_rho_undefined, 0);

        let three = aggregate(&[
            record("a", Some(0.2), Some(0.0)),
            record("b", None, Some(0.3)),
            record("c", Some(0.6), None),
        ])
        .unwrap();
        assert!((three.mean_rho.unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(three.n_rho_undefined, 1);
        assert_eq!(three.n_r2_undefined, 1);
        assert_eq!(three.n_users_total, 3);

        let none = aggregate(&[record("a", None, None)]).unwrap();
        assert_eq!(none.mean_rho, None);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn bootstrap_constant_values() {
        let r = bootstrap_ci(&[0.3; 17], 500, 0.95, 9).unwrap();
        assert_eq!((r.ci_low, r.point_mean, r.ci_high), (0.3, 0.3, 0.3));
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 0, 0.95, 0).is_err());
        assert!(bootstrap_ci(&[1.0], 10, 1.0, 0).is_err());
        assert!(bootstrap_compare(&[1.0, 2.0], &[1.0], 10, 0).is_err());
    }

    #[test]
    fn compare_tie_and_dominance() {
        let base: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let same = bootstrap_compare(&base, &base, 300, 1).unwrap();
        assert_eq!(same.p_delta_positive, 0.0);
        let better: Vec<f64> = base.iter().map(|v| v + 0.1).collect();
        assert_eq!(bootstrap_compare(&base, &better, 300, 1).unwrap().p_delta_positive, 0.0);
        assert_eq!(bootstrap_compare(&better, &base, 300, 1).unwrap().p_delta_positive, 1.0);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile_sorted(&s, 0.0), 0.0);
        assert_eq!(quantile_sorted(&s, 1.0), 3.0);
        assert_eq!(quantile_sorted(&s, 0.5), 1.5);
    }
}
