use std::collections::BTreeMap;

use rayon::prelude::*;

use super::surprise::{dsa, Kde, KdeConfig};
use super::{kl_score, max_p, var_score, var_weighted, MetricId, ScoreVector};
use crate::error::{Error, Result};
use crate::model::{mc_predict_proba, LayerSel, MlpModel, ProbTensor};
use crate::tensor::Matrix;

/// Training-set activations needed by LSA and DSA.
#[derive(Debug, Clone)]
pub struct SurpriseReference {
    kde: Kde,
    all_hidden: Matrix,
    predictions: Vec<usize>,
}

impl SurpriseReference {
    /// LSA uses the deepest hidden layer; DSA uses all hidden layers
    /// concatenated and the model's own predictions on the training inputs.
    pub fn build(model: &MlpModel, train_x: &Matrix, kde: &KdeConfig) -> Result<Self> {
        let deepest = model.activations(train_x, LayerSel::Deepest)?;
        let all_hidden = model.activations(train_x, LayerSel::AllHidden)?;
        Ok(SurpriseReference {
            kde: Kde::fit(&deepest, kde)?,
            all_hidden,
            predictions: model.predict(train_x)?,
        })
    }

    pub fn kde(&self) -> &Kde {
        &self.kde
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreRequest<'a> {
    pub metrics: &'a [MetricId],
    pub k: usize,
    pub seed: u64,
    pub reference: Option<&'a SurpriseReference>,
}

/// Everything computed while scoring a batch of inputs.
#[derive(Debug, Clone)]
pub struct MetricScores {
    pub det_probs: Matrix,
    pub predictions: Vec<usize>,
    pub tensor: Option<ProbTensor>,
    pub scores: BTreeMap<MetricId, ScoreVector>,
    pub lsa_density: Option<Vec<f64>>,
}

impl MetricScores {
    pub fn get(&self, m: MetricId) -> Result<&ScoreVector> {
        self.scores
            .get(&m)
            .ok_or_else(|| Error::InvalidArgument(format!("metric {m} was not computed")))
    }
}

/// Computes the requested metrics for every row of `x`.
pub fn score_inputs(model: &MlpModel, x: &Matrix, req: &ScoreRequest<'_>) -> Result<MetricScores> {
    let det_probs = model.predict_proba(x)?;
    let predictions = det_probs.argmax_rows();
    let tensor = if req.metrics.iter().any(|m| m.needs_mutants()) {
        Some(mc_predict_proba(model, x, req.k, req.seed)?)
    } else {
        None
    };
    let needs_ref = req.metrics.iter().any(|m| m.needs_training_activations());
    let reference = match (needs_ref, req.reference) {
        (true, None) => {
            return Err(Error::InvalidArgument(
                "LSA/DSA need training activations but none were supplied".into(),
            ))
        }
        (_, r) => r,
    };

    let mut scores = BTreeMap::new();
    let mut lsa_density = None;
    for &m in req.metrics {
        if scores.contains_key(&m) {
            continue;
        }
        let sv = match m {
            MetricId::MaxP => max_p(&det_probs)?,
            MetricId::Var => var_score(tensor.as_ref().unwrap())?,
            MetricId::VarW => var_weighted(tensor.as_ref().unwrap(), &det_probs)?,
            MetricId::KL => kl_score(tensor.as_ref().unwrap())?,
            MetricId::LSA => {
                let r = reference.unwrap();
                let acts = model.activations(x, LayerSel::Deepest)?;
                let logd: Vec<f64> = (0..acts.rows())
                    .into_par_iter()
                    .map(|i| r.kde.log_density(acts.row(i)))
                    .collect();
                let values = logd.iter().map(|&l| r.kde.surprise(l)).collect();
                lsa_density = Some(logd.iter().map(|l| l.exp()).collect());
                ScoreVector::new(MetricId::LSA, values)?
            }
            MetricId::DSA => {
                let r = reference.unwrap();
                let acts = model.activations(x, LayerSel::AllHidden)?;
                dsa(&r.all_hidden, &r.predictions, &acts, &predictions)?.into_scores()?
            }
        };
        scores.insert(m, sv);
    }
    Ok(MetricScores {
        det_probs,
        predictions,
        tensor,
        scores,
        lsa_density,
    })
}
