//! Selection scores: prediction probability, dropout variance (plain and
//! weighted), KL divergence of mutant votes from uniform, and the two
//! surprise-adequacy scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ProbTensor;
use crate::tensor::{argmax, Matrix};

mod suite;
mod surprise;

pub use suite::{score_inputs, MetricScores, ScoreRequest, SurpriseReference};
pub use surprise::{dsa, lsa, lsa_detailed, BandwidthRule, DsaIssue, DsaScores, Kde, KdeConfig, LsaOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricId {
    MaxP,
    Var,
    VarW,
    KL,
    LSA,
    DSA,
}

impl MetricId {
    pub const ALL: [MetricId; 6] = [
        MetricId::KL,
        MetricId::Var,
        MetricId::LSA,
        MetricId::DSA,
        MetricId::VarW,
        MetricId::MaxP,
    ];

    /// The four scores derived from model uncertainty.
    pub const UNCERTAINTY: [MetricId; 4] = [MetricId::KL, MetricId::Var, MetricId::VarW, MetricId::MaxP];

    pub fn orientation(self) -> Orientation {
        match self {
            MetricId::MaxP | MetricId::KL => Orientation::LowIsUncertain,
            MetricId::Var | MetricId::VarW | MetricId::LSA | MetricId::DSA => Orientation::HighIsUncertain,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricId::MaxP => "MaxP",
            MetricId::Var => "Var",
            MetricId::VarW => "VarW",
            MetricId::KL => "KL",
            MetricId::LSA => "LSA",
            MetricId::DSA => "DSA",
        }
    }

    /// Whether computing this score needs Monte-Carlo dropout passes.
    pub fn needs_mutants(self) -> bool {
        matches!(self, MetricId::Var | MetricId::VarW | MetricId::KL)
    }

    pub fn needs_training_activations(self) -> bool {
        matches!(self, MetricId::LSA | MetricId::DSA)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxp" | "p" => Ok(MetricId::MaxP),
            "var" => Ok(MetricId::Var),
            "varw" | "var_w" => Ok(MetricId::VarW),
            "kl" => Ok(MetricId::KL),
            "lsa" => Ok(MetricId::LSA),
            "dsa" => Ok(MetricId::DSA),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

/// Which end of a score range signals more uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    LowIsUncertain,
    HighIsUncertain,
}

/// Per-input scores of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub metric: MetricId,
    pub orientation: Orientation,
    pub values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(metric: MetricId, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score vector"));
        }
        Ok(ScoreVector {
            metric,
            orientation: metric.orientation(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Score of input `i` flipped so that larger always means more uncertain.
    pub fn uncertainty(&self, i: usize) -> f64 {
        match self.orientation {
            Orientation::HighIsUncertain => self.values[i],
            Orientation::LowIsUncertain => -self.values[i],
        }
    }

    pub fn select(&self, idx: &[usize]) -> ScoreVector {
        ScoreVector {
            metric: self.metric,
            orientation: self.orientation,
            values: idx.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

/// Highest class probability of every row.
pub fn max_p(probs: &Matrix) -> Result<ScoreVector> {
    if probs.cols() == 0 {
        return Err(Error::Empty("max_p"));
    }
    let values = probs
        .iter_rows()
        .map(|r| f64::from(r.iter().copied().fold(f32::NEG_INFINITY, f32::max)))
        .collect();
    ScoreVector::new(MetricId::MaxP, values)
}

/// Mean over classes of the population variance of the mutants' probabilities.
pub fn var_score(tensor: &ProbTensor) -> Result<ScoreVector> {
    let k = tensor.k();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs k >= 2 mutants, got {k}"
        )));
    }
    let c = tensor.n_classes();
    let values = (0..tensor.n())
        .map(|i| {
            let mut total = 0.0f64;
            for class in 0..c {
                let mean = (0..k).map(|j| f64::from(tensor.row(j, i)[class])).sum::<f64>() / k as f64;
                let ss: f64 = (0..k)
                    .map(|j| {
                        let d = f64::from(tensor.row(j, i)[class]) - mean;
                        d * d
                    })
                    .sum();
                total += ss / k as f64;
            }
            total / c as f64
        })
        .collect();
    ScoreVector::new(MetricId::Var, values)
}

/// Variance score divided by the deterministic model's highest probability.
pub fn var_weighted(tensor: &ProbTensor, det_probs: &Matrix) -> Result<ScoreVector> {
    if det_probs.rows() != tensor.n() || det_probs.cols() != tensor.n_classes() {
        return Err(Error::shape(
            "var_weighted",
            format!("{}x{}", tensor.n(), tensor.n_classes()),
            format!("{}x{}", det_probs.rows(), det_probs.cols()),
        ));
    }
    let var = var_score(tensor)?;
    let maxp = max_p(det_probs)?;
    let values = var.values.iter().zip(&maxp.values).map(|(v, p)| v / p).collect();
    ScoreVector::new(MetricId::VarW, values)
}

/// KL divergence between the histogram of mutant argmax votes and the
/// uniform distribution over classes. Empty bins contribute 0.
pub fn kl_score(tensor: &ProbTensor) -> Result<ScoreVector> {
    let (k, c) = (tensor.k(), tensor.n_classes());
    let mut votes = vec![0usize; c];
    let values = (0..tensor.n())
        .map(|i| {
            votes.iter_mut().for_each(|v| *v = 0);
            for j in 0..k {
                votes[argmax(tensor.row(j, i))] += 1;
            }
            votes
                .iter()
                .filter(|&&v| v > 0)
                .map(|&v| {
                    let h = v as f64 / k as f64;
                    h * (h * c as f64).ln()
                })
                .sum::<f64>()
        })
        .collect();
    ScoreVector::new(MetricId::KL, values)
}
