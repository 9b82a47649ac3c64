//! Correlation between scores and the correctness indicator, and decile
//! accuracy curves.
//!
//! Degenerate inputs (a constant side) are reported as
//! [`Error::Degenerate`], never as a silent zero.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricId, Orientation, ScoreVector};

/// Default cap on the sample size accepted by [`distance_correlation`].
pub const DCOR_MAX_N: usize = 20_000;

/// Per-input flag: `true` when the model's prediction equals the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessVector(pub Vec<bool>);

impl CorrectnessVector {
    pub fn from_predictions(pred: &[usize], labels: &[usize]) -> Result<Self> {
        if pred.len() != labels.len() {
            return Err(Error::shape("correctness", labels.len(), pred.len()));
        }
        Ok(CorrectnessVector(
            pred.iter().zip(labels).map(|(p, l)| p == l).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// 1.0 for correct, 0.0 for misclassified.
    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn accuracy(&self) -> Result<f64> {
        if self.0.is_empty() {
            return Err(Error::Empty("accuracy"));
        }
        Ok(self.0.iter().filter(|&&b| b).count() as f64 / self.0.len() as f64)
    }
}

fn check_pair(x: &[f64], y: &[f64], measure: &'static str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(measure, x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{measure} needs at least 2 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(measure));
    }
    Ok(())
}

/// Number of pairs within runs of equal values of an already sorted sequence.
fn tied_pairs<T, F: Fn(&T, &T) -> bool>(sorted: &[T], eq: F) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable merge sort of `v` by value, returning the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b with tie correction, in O(n log n) (Knight's algorithm).
///
/// `tau_b = (n0 - n1 - n2 + n3 - 2 S) / sqrt((n0 - n1)(n0 - n2))` where `n1`,
/// `n2` count pairs tied in x and y, `n3` pairs tied in both, and `S` the
/// inversions of y after sorting by (x, y).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "kendall_tau_b")?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n1 = tied_pairs(&pairs, |a, b| a.0 == b.0);
    let n3 = tied_pairs(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys, |a, b| a == b);
    let n0 = n * (n - 1) / 2;
    if n0 == n1 || n0 == n2 {
        return Err(Error::Degenerate {
            measure: "kendall tau-b",
            reason: "one side is constant",
        });
    }
    let num = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * swaps as i128;
    let den = ((n0 - n1) as f64).sqrt() * ((n0 - n2) as f64).sqrt();
    Ok((num as f64 / den).clamp(-1.0, 1.0))
}

/// Pearson product-moment correlation (two-pass, `f64`).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "pearson")?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate {
            measure: "pearson",
            reason: "zero variance",
        });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Sample distance correlation (V-statistic) via double-centered distance
/// matrices, without materializing them.
pub fn distance_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    distance_correlation_capped(x, y, DCOR_MAX_N)
}

pub fn distance_correlation_capped(x: &[f64], y: &[f64], cap: usize) -> Result<f64> {
    check_pair(x, y, "distance_correlation")?;
    let n = x.len();
    if n > cap {
        return Err(Error::TooLarge {
            measure: "distance correlation",
            n,
            cap,
        });
    }
    let row_means = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|i| v.iter().map(|w| (v[i] - w).abs()).sum::<f64>() / n as f64)
            .collect()
    };
    let (ax, ay) = (row_means(x), row_means(y));
    let gx = ax.iter().sum::<f64>() / n as f64;
    let gy = ay.iter().sum::<f64>() / n as f64;
    // Row sums are computed independently, then reduced in index order, so the
    // result does not depend on how rows are distributed across threads.
    let rows: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0f64; 3];
            for j in 0..n {
                let a = (x[i] - x[j]).abs() - ax[i] - ax[j] + gx;
                let b = (y[i] - y[j]).abs() - ay[i] - ay[j] + gy;
                acc[0] += a * b;
                acc[1] += a * a;
                acc[2] += b * b;
            }
            acc
        })
        .collect();
    let mut tot = [0.0f64; 3];
    for r in &rows {
        for k in 0..3 {
            tot[k] += r[k];
        }
    }
    let (dcov, dvx, dvy) = (tot[0], tot[1], tot[2]);
    if dvx <= 0.0 || dvy <= 0.0 {
        return Err(Error::Degenerate {
            measure: "distance correlation",
            reason: "zero distance variance",
        });
    }
    let r2 = dcov.max(0.0) / (dvx * dvy).sqrt();
    Ok(r2.sqrt().clamp(0.0, 1.0))
}

/// Correlations of one metric with the correctness indicator.
/// `None` marks a degenerate (undefined) correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric: MetricId,
    pub kendall: Option<f64>,
    pub distance: Option<f64>,
    pub pearson: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Fraction of correctly classified inputs.
    pub accuracy: Option<f64>,
    pub metrics: Vec<MetricCorrelation>,
}

impl CorrelationReport {
    pub fn get(&self, m: MetricId) -> Option<&MetricCorrelation> {
        self.metrics.iter().find(|c| c.metric == m)
    }
}

fn degenerate_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Kendall, distance and Pearson correlation of every score vector with `correct`.
pub fn correlation_report(scores: &[&ScoreVector], correct: &CorrectnessVector) -> Result<CorrelationReport> {
    let b = correct.as_f64();
    let mut metrics = Vec::with_capacity(scores.len());
    for s in scores {
        if s.len() != b.len() {
            return Err(Error::shape("correlation_report", b.len(), s.len()));
        }
        metrics.push(MetricCorrelation {
            metric: s.metric,
            kendall: degenerate_to_none(kendall_tau_b(&s.values, &b))?,
            distance: degenerate_to_none(distance_correlation(&s.values, &b))?,
            pearson: degenerate_to_none(pearson(&s.values, &b))?,
            n: b.len(),
        });
    }
    Ok(CorrelationReport {
        accuracy: correct.accuracy().ok(),
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileCurve {
    pub metric: MetricId,
    pub fractions: Vec<f64>,
    pub cumulative_accuracy: Vec<f64>,
    pub mean_metric_per_decile: Vec<f64>,
}

/// Indices ordered most-uncertain-first; ties keep the original order.
pub fn uncertainty_order(scores: &ScoreVector) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = scores.values[a].total_cmp(&scores.values[b]);
        match scores.orientation {
            Orientation::HighIsUncertain => ord.reverse(),
            Orientation::LowIsUncertain => ord,
        }
        .then(a.cmp(&b))
    });
    idx
}

/// Sorts inputs most-uncertain-first and splits them into 10 subsets; the
/// first `n % 10` subsets get one extra input. Point `i` of the curve is the
/// accuracy over subsets `0..=i`.
pub fn decile_curve(scores: &ScoreVector, correct: &CorrectnessVector) -> Result<DecileCurve> {
    let n = scores.len();
    if correct.len() != n {
        return Err(Error::shape("decile_curve", n, correct.len()));
    }
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "decile curve needs at least 10 inputs, got {n}"
        )));
    }
    let order = uncertainty_order(scores);
    let (base, extra) = (n / 10, n % 10);
    let mut cumulative_accuracy = Vec::with_capacity(10);
    let mut mean_metric_per_decile = Vec::with_capacity(10);
    let (mut start, mut hits) = (0usize, 0usize);
    for d in 0..10 {
        let size = base + usize::from(d < extra);
        let part = &order[start..start + size];
        hits += part.iter().filter(|&&i| correct.0[i]).count();
        mean_metric_per_decile.push(part.iter().map(|&i| scores.values[i]).sum::<f64>() / size as f64);
        start += size;
        cumulative_accuracy.push(hits as f64 / start as f64);
    }
    Ok(DecileCurve {
        metric: scores.metric,
        fractions: (1..=10).map(|i| i as f64 / 10.0).collect(),
        cumulative_accuracy,
        mean_metric_per_decile,
    })
}
