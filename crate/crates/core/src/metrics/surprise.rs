//! Likelihood- and distance-based surprise adequacy over activation traces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MetricId, ScoreVector};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "value")]
pub enum BandwidthRule {
    /// `sigma_d * n^(-1/(D+4))` per retained dimension.
    Scott,
    /// `sigma_d * (n (D+2) / 4)^(-1/(D+4))` per retained dimension.
    Silverman,
    /// The same bandwidth in every retained dimension.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdeConfig {
    pub bandwidth: BandwidthRule,
    /// Dimensions whose training variance falls below this are dropped.
    pub variance_floor: f64,
    /// Added to the density before taking `-ln`.
    pub density_floor: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        KdeConfig {
            bandwidth: BandwidthRule::Scott,
            variance_floor: 1e-5,
            density_floor: 0.0,
        }
    }
}

/// Gaussian KDE with a diagonal bandwidth matrix, fitted on training activations.
#[derive(Debug, Clone)]
pub struct Kde {
    dims: Vec<usize>,
    bandwidths: Vec<f64>,
    /// Training points restricted to `dims`, pre-divided by the bandwidths.
    points: Vec<f64>,
    n: usize,
    log_norm: f64,
    density_floor: f64,
}

impl Kde {
    pub fn fit(train: &Matrix, cfg: &KdeConfig) -> Result<Self> {
        if train.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "LSA needs at least 2 training rows, got {}",
                train.rows()
            )));
        }
        if !(cfg.variance_floor >= 0.0) || !(cfg.density_floor >= 0.0) {
            return Err(Error::InvalidArgument("KDE floors must be non-negative".into()));
        }
        let (_, var) = train.column_moments()?;
        let dims: Vec<usize> = (0..train.cols())
            .filter(|&d| var[d] >= cfg.variance_floor && var[d] > 0.0)
            .collect();
        if dims.is_empty() {
            return Err(Error::Degenerate {
                measure: "LSA",
                reason: "every activation dimension was filtered out by the variance floor",
            });
        }
        let n = train.rows();
        let dd = dims.len() as f64;
        let bandwidths: Vec<f64> = match cfg.bandwidth {
            BandwidthRule::Scott => {
                let f = (n as f64).powf(-1.0 / (dd + 4.0));
                dims.iter().map(|&d| var[d].sqrt() * f).collect()
            }
            BandwidthRule::Silverman => {
                let f = (n as f64 * (dd + 2.0) / 4.0).powf(-1.0 / (dd + 4.0));
                dims.iter().map(|&d| var[d].sqrt() * f).collect()
            }
            BandwidthRule::Fixed(h) => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
                }
                vec![h; dims.len()]
            }
        };
        let mut points = Vec::with_capacity(n * dims.len());
        for row in train.iter_rows() {
            points.extend(dims.iter().zip(&bandwidths).map(|(&d, h)| f64::from(row[d]) / h));
        }
        let log_norm = (n as f64).ln()
            + bandwidths
                .iter()
                .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
                .sum::<f64>();
        Ok(Kde {
            dims,
            bandwidths,
            points,
            n,
            log_norm,
            density_floor: cfg.density_floor,
        })
    }

    pub fn retained_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Log of the kernel density at `x`, via log-sum-exp.
    pub fn log_density(&self, x: &[f32]) -> f64 {
        let q: Vec<f64> = self
            .dims
            .iter()
            .zip(&self.bandwidths)
            .map(|(&d, h)| f64::from(x[d]) / h)
            .collect();
        let m = q.len();
        let mut exps = Vec::with_capacity(self.n);
        let mut max = f64::NEG_INFINITY;
        for p in self.points.chunks_exact(m) {
            let sq: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
            let e = -0.5 * sq;
            max = max.max(e);
            exps.push(e);
        }
        let s: f64 = exps.iter().map(|e| (e - max).exp()).sum();
        max + s.ln() - self.log_norm
    }

    /// `-ln(density + density_floor)`.
    pub fn surprise(&self, log_density: f64) -> f64 {
        if self.density_floor > 0.0 {
            let lf = self.density_floor.ln();
            let (hi, lo) = if log_density > lf {
                (log_density, lf)
            } else {
                (lf, log_density)
            };
            -(hi + (lo - hi).exp().ln_1p())
        } else {
            -log_density
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsaOutput {
    pub scores: ScoreVector,
    pub density: Vec<f64>,
    pub log_density: Vec<f64>,
    pub retained_dims: Vec<usize>,
    pub bandwidths: Vec<f64>,
}

/// LSA scores: `-ln` of the kernel density of each test activation vector
/// under the training activations. Higher means more surprising.
pub fn lsa(train_acts: &Matrix, test_acts: &Matrix, cfg: &KdeConfig) -> Result<ScoreVector> {
    lsa_detailed(train_acts, test_acts, cfg).map(|o| o.scores)
}

/// [`lsa`] together with the raw densities and the fitted bandwidths.
pub fn lsa_detailed(train_acts: &Matrix, test_acts: &Matrix, cfg: &KdeConfig) -> Result<LsaOutput> {
    if train_acts.cols() != test_acts.cols() {
        return Err(Error::shape("lsa activations", train_acts.cols(), test_acts.cols()));
    }
    let kde = Kde::fit(train_acts, cfg)?;
    let log_density: Vec<f64> = (0..test_acts.rows())
        .into_par_iter()
        .map(|i| kde.log_density(test_acts.row(i)))
        .collect();
    let values = log_density.iter().map(|&l| kde.surprise(l)).collect();
    Ok(LsaOutput {
        scores: ScoreVector::new(MetricId::LSA, values)?,
        density: log_density.iter().map(|l| l.exp()).collect(),
        log_density,
        retained_dims: kde.dims,
        bandwidths: kde.bandwidths,
    })
}

/// Why a DSA score could not be computed for one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DsaIssue {
    /// No training point is predicted in the input's class.
    NoSameClass,
    /// Every training point is predicted in the input's class.
    NoOtherClass,
    /// The input coincides with a training point of another class.
    ZeroOtherDistance,
}

impl DsaIssue {
    pub fn describe(self) -> &'static str {
        match self {
            DsaIssue::NoSameClass => "no training point shares the predicted class",
            DsaIssue::NoOtherClass => "no training point has a different predicted class",
            DsaIssue::ZeroOtherDistance => "input coincides with a training point of another class",
        }
    }
}

/// Per-input DSA results; invalid inputs keep their reason.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaScores {
    pub per_input: Vec<Result<f64, DsaIssue>>,
}

impl DsaScores {
    pub fn invalid(&self) -> impl Iterator<Item = (usize, DsaIssue)> + '_ {
        self.per_input
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.err().map(|e| (i, e)))
    }

    /// Fails with the first invalid input, if any.
    pub fn into_scores(self) -> Result<ScoreVector> {
        let mut values = Vec::with_capacity(self.per_input.len());
        for (index, r) in self.per_input.into_iter().enumerate() {
            match r {
                Ok(v) => values.push(v),
                Err(e) => {
                    return Err(Error::Scoring {
                        index,
                        reason: format!("DSA: {}", e.describe()),
                    })
                }
            }
        }
        ScoreVector::new(MetricId::DSA, values)
    }
}

/// DSA: distance to the nearest training point predicted in the same class,
/// divided by the distance to the nearest training point predicted in any
/// other class (Euclidean, in activation space).
pub fn dsa(train_acts: &Matrix, train_pred: &[usize], test_acts: &Matrix, test_pred: &[usize]) -> Result<DsaScores> {
    if train_acts.cols() != test_acts.cols() {
        return Err(Error::shape("dsa activations", train_acts.cols(), test_acts.cols()));
    }
    if train_pred.len() != train_acts.rows() {
        return Err(Error::shape(
            "dsa train predictions",
            train_acts.rows(),
            train_pred.len(),
        ));
    }
    if test_pred.len() != test_acts.rows() {
        return Err(Error::shape("dsa test predictions", test_acts.rows(), test_pred.len()));
    }
    let per_input = (0..test_acts.rows())
        .into_par_iter()
        .map(|i| {
            let x = test_acts.row(i);
            let class = test_pred[i];
            let mut same = f64::INFINITY;
            let mut other = f64::INFINITY;
            for (j, t) in train_acts.iter_rows().enumerate() {
                let d: f64 = x
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let v = f64::from(a) - f64::from(b);
                        v * v
                    })
                    .sum();
                // Strict comparison keeps the lowest index on ties.
                if train_pred[j] == class {
                    if d < same {
                        same = d;
                    }
                } else if d < other {
                    other = d;
                }
            }
            if same.is_infinite() {
                Err(DsaIssue::NoSameClass)
            } else if other.is_infinite() {
                Err(DsaIssue::NoOtherClass)
            } else if other == 0.0 {
                Err(DsaIssue::ZeroOtherDistance)
            } else {
                Ok(same.sqrt() / other.sqrt())
            }
        })
        .collect();
    Ok(DsaScores { per_input })
}
