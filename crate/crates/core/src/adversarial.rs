//! Iterative FGSM attacks, per-iteration metric traces, and real +
//! adversarial evaluation sets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{score_inputs, MetricId, ScoreRequest, SurpriseReference};
use crate::model::{Dataset, MlpModel, Split};
use crate::stats::kendall_tau_b;
use crate::tensor::{median, Matrix};

/// Box constraint applied to every feature after each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for ClipRange {
    fn default() -> Self {
        ClipRange { lo: 0.0, hi: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Step size, in feature units.
    pub eps: f32,
    pub max_iters: usize,
    pub clip: ClipRange,
}

impl Default for AttackConfig {
    /// 1% of the unit feature range per step, at most 50 steps.
    fn default() -> Self {
        AttackConfig {
            eps: 0.01,
            max_iters: 50,
            clip: ClipRange::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.clip.lo < self.clip.hi) {
            return Err(Error::InvalidArgument("clip range must satisfy lo < hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub x: Vec<f32>,
    pub predicted: usize,
}

/// The sequence of inputs visited by one attack; `iterates[0]` is the
/// original input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub original_index: usize,
    pub true_label: usize,
    pub eps: f32,
    pub iters_used: usize,
    /// The predicted class changed from that of the original input.
    pub success: bool,
    pub iterates: Vec<Iterate>,
}

impl AttackTrace {
    pub fn original_prediction(&self) -> usize {
        self.iterates[0].predicted
    }

    pub fn last(&self) -> &Iterate {
        self.iterates.last().unwrap()
    }

    /// The last iterate that still carried the original prediction.
    pub fn penultimate(&self) -> Option<&Iterate> {
        self.success.then(|| &self.iterates[self.iterates.len() - 2])
    }
}

fn predict_one(model: &MlpModel, x: &[f32]) -> Result<usize> {
    Ok(model.predict(&Matrix::new(1, x.len(), x.to_vec())?)?[0])
}

/// Steps `x ← clip(x + eps·sign(∇ₓ loss(x, true_label)))` until the
/// predicted class differs from the original one or `max_iters` is reached.
pub fn fgsm_attack(
    model: &MlpModel,
    x: &[f32],
    true_label: usize,
    eps: f32,
    max_iters: usize,
    clip: ClipRange,
) -> Result<AttackTrace> {
    AttackConfig { eps, max_iters, clip }.validate()?;
    if true_label >= model.n_classes() {
        return Err(Error::InvalidArgument(format!("label {true_label} out of range")));
    }
    let original = predict_one(model, x)?;
    let mut iterates = vec![Iterate {
        x: x.to_vec(),
        predicted: original,
    }];
    let mut cur = x.to_vec();
    let mut success = false;
    for _ in 0..max_iters {
        let g = model.input_gradient(&cur, true_label)?;
        for (v, gi) in cur.iter_mut().zip(&g) {
            let step = if *gi > 0.0 {
                eps
            } else if *gi < 0.0 {
                -eps
            } else {
                0.0
            };
            *v = (*v + step).clamp(clip.lo, clip.hi);
        }
        let predicted = predict_one(model, &cur)?;
        iterates.push(Iterate {
            x: cur.clone(),
            predicted,
        });
        if predicted != original {
            success = true;
            break;
        }
    }
    Ok(AttackTrace {
        original_index: 0,
        true_label,
        eps,
        iters_used: iterates.len() - 1,
        success,
        iterates,
    })
}

/// Attacks `data` rows `indices` independently.
pub fn attack_rows(
    model: &MlpModel,
    data: &Dataset,
    indices: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackTrace>> {
    cfg.validate()?;
    indices
        .par_iter()
        .map(|&i| {
            if i >= data.len() {
                return Err(Error::InvalidArgument(format!("row {i} out of range")));
            }
            let mut t = fgsm_attack(
                model,
                data.features.row(i),
                data.labels[i],
                cfg.eps,
                cfg.max_iters,
                cfg.clip,
            )?;
            t.original_index = i;
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Real,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    /// The first misclassified iterate of every successful trace.
    FinalOnly,
    /// The final iterate and the one before it.
    FinalPlusPenultimate,
}

/// Real rows followed by adversarial rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub source: Vec<SourceTag>,
    /// Index of the real row an adversarial row was derived from.
    pub provenance: Vec<Option<usize>>,
}

impl MixedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_adversarial(&self) -> usize {
        self.source.iter().filter(|s| **s == SourceTag::Adversarial).count()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.inputs.clone(), self.labels.clone(), self.n_classes, Split::Test)
    }

    /// Only the adversarial rows.
    pub fn adversarial_only(&self) -> MixedSet {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.source[i] == SourceTag::Adversarial)
            .collect();
        MixedSet {
            inputs: self.inputs.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            source: vec![SourceTag::Adversarial; idx.len()],
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
        }
    }
}

/// Appends adversarial iterates to `real`. Unsuccessful traces are skipped
/// and reported in the returned warnings.
pub fn build_mixed_set(real: &Dataset, traces: &[AttackTrace], mode: MixMode) -> Result<(MixedSet, Vec<String>)> {
    let mut rows: Vec<&[f32]> = real.features.iter_rows().collect();
    let mut labels = real.labels.clone();
    let mut source = vec![SourceTag::Real; real.len()];
    let mut provenance = vec![None; real.len()];
    let mut warnings = Vec::new();
    for (t_idx, t) in traces.iter().enumerate() {
        let i = t.original_index;
        if i >= real.len() || real.labels[i] != t.true_label || real.features.row(i) != t.iterates[0].x.as_slice() {
            return Err(Error::InvalidArgument(format!(
                "trace {t_idx} does not derive from row {i} of the real set"
            )));
        }
        if !t.success {
            warnings.push(format!(
                "trace {t_idx} (row {i}) did not flip within {} iterations; skipped",
                t.iters_used
            ));
            continue;
        }
        let picked: Vec<&Iterate> = match mode {
            MixMode::FinalOnly => vec![t.last()],
            MixMode::FinalPlusPenultimate => vec![t.penultimate().unwrap(), t.last()],
        };
        for it in picked {
            rows.push(&it.x);
            labels.push(t.true_label);
            source.push(SourceTag::Adversarial);
            provenance.push(Some(i));
        }
    }
    let d = real.dim();
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok((
        MixedSet {
            inputs: Matrix::new(rows.len(), d, data)?,
            labels,
            n_classes: real.n_classes,
            source,
            provenance,
        },
        warnings,
    ))
}

/// All six scores of one iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub trace: usize,
    pub original_index: usize,
    pub iteration: usize,
    pub predicted: usize,
    pub scores: BTreeMap<MetricId, f64>,
}

/// Kendall τ of each score against the iteration index within one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceTrend {
    pub trace: usize,
    pub original_index: usize,
    /// `None` where the trend is undefined (constant scores).
    pub tau: BTreeMap<MetricId, Option<f64>>,
    /// The trace has a single iterate, so no trend exists.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendTable {
    pub rows: Vec<TrendRow>,
    pub traces: Vec<TraceTrend>,
    /// Median per-trace τ over traces where it is defined.
    pub median_tau: BTreeMap<MetricId, Option<f64>>,
}

/// Scores every iterate of every trace with all six metrics and summarizes
/// how each score moves along the attack.
pub fn trace_metric_trends(
    model: &MlpModel,
    traces: &[AttackTrace],
    reference: &SurpriseReference,
    k: usize,
    seed: u64,
) -> Result<TrendTable> {
    if traces.is_empty() {
        return Err(Error::Empty("trace_metric_trends"));
    }
    let d = model.input_dim();
    let data: Vec<f32> = traces
        .iter()
        .flat_map(|t| t.iterates.iter().flat_map(|it| it.x.iter().copied()))
        .collect();
    let n: usize = traces.iter().map(|t| t.iterates.len()).sum();
    let x = Matrix::new(n, d, data)?;
    let scored = score_inputs(
        model,
        &x,
        &ScoreRequest {
            metrics: &MetricId::ALL,
            k,
            seed,
            reference: Some(reference),
        },
    )?;

    let mut rows = Vec::with_capacity(n);
    let mut trends = Vec::with_capacity(traces.len());
    let mut offset = 0;
    for (t_idx, t) in traces.iter().enumerate() {
        let len = t.iterates.len();
        let iters: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let mut tau = BTreeMap::new();
        for m in MetricId::ALL {
            let values = &scored.get(m)?.values[offset..offset + len];
            let v = if len < 2 {
                None
            } else {
                match kendall_tau_b(values, &iters) {
                    Ok(v) => Some(v),
                    Err(Error::Degenerate { .. }) => None,
                    Err(e) => return Err(e),
                }
            };
            tau.insert(m, v);
        }
        for (i, it) in t.iterates.iter().enumerate() {
            rows.push(TrendRow {
                trace: t_idx,
                original_index: t.original_index,
                iteration: i,
                predicted: it.predicted,
                scores: MetricId::ALL
                    .iter()
                    .map(|&m| Ok((m, scored.get(m)?.values[offset + i])))
                    .collect::<Result<_>>()?,
            });
        }
        trends.push(TraceTrend {
            trace: t_idx,
            original_index: t.original_index,
            tau,
            flagged: len < 2,
        });
        offset += len;
    }

    let median_tau = MetricId::ALL
        .iter()
        .map(|&m| {
            let defined: Vec<f64> = trends.iter().filter_map(|t| t.tau[&m]).collect();
            (m, median(&defined).ok())
        })
        .collect();
    Ok(TrendTable {
        rows,
        traces: trends,
        median_tau,
    })
}

/// Adversarial traces flattened for storage: every iterate as one matrix row
/// plus a JSON-friendly description of where each trace starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub config: AttackConfig,
    pub traces: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub original_index: usize,
    pub true_label: usize,
    pub success: bool,
    pub iters_used: usize,
    /// First row of this trace in the iterate matrix.
    pub first_row: usize,
    pub predicted: Vec<usize>,
}

pub fn flatten_traces(traces: &[AttackTrace], cfg: &AttackConfig, dim: usize) -> Result<(Matrix, TraceSidecar)> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(traces.len());
    let mut row = 0;
    for t in traces {
        entries.push(TraceEntry {
            original_index: t.original_index,
            true_label: t.true_label,
            success: t.success,
            iters_used: t.iters_used,
            first_row: row,
            predicted: t.iterates.iter().map(|i| i.predicted).collect(),
        });
        for it in &t.iterates {
            data.extend_from_slice(&it.x);
        }
        row += t.iterates.len();
    }
    Ok((
        Matrix::new(row, dim, data)?,
        TraceSidecar {
            config: cfg.clone(),
            traces: entries,
        },
    ))
}

pub fn unflatten_traces(iterates: &Matrix, sidecar: &TraceSidecar) -> Result<Vec<AttackTrace>> {
    sidecar
        .traces
        .iter()
        .map(|e| {
            let len = e.predicted.len();
            if len != e.iters_used + 1 || e.first_row + len > iterates.rows() {
                return Err(Error::InvalidArgument(format!(
                    "trace for row {} does not fit the iterate matrix",
                    e.original_index
                )));
            }
            Ok(AttackTrace {
                original_index: e.original_index,
                true_label: e.true_label,
                eps: sidecar.config.eps,
                iters_used: e.iters_used,
                success: e.success,
                iterates: (0..len)
                    .map(|i| Iterate {
                        x: iterates.row(e.first_row + i).to_vec(),
                        predicted: e.predicted[i],
                    })
                    .collect(),
            })
        })
        .collect()
}
