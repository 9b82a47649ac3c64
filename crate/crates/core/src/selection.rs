//! Ranking inputs for labelling and the budgeted retraining simulation.
//!
//! Each repetition starts from `initial_size` random pool items, then
//! repeatedly trains a model, scores the remaining pool with it, and moves the
//! `batch_size` most uncertain items into the training set until the pool is
//! exhausted.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{score_inputs, KdeConfig, MetricId, Orientation, ScoreRequest, ScoreVector, SurpriseReference};
use crate::model::{train_with_history, Dataset, MlpModel, ModelConfig, Split, TrainConfig, DEFAULT_MC_PASSES};
use crate::tensor::{child_rng, derive_seed, median, seeded_shuffle};

/// What a policy ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Primary {
    Metric(MetricId),
    Random,
}

impl fmt::Display for Primary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primary::Metric(m) => write!(f, "{m}"),
            Primary::Random => f.write_str("random"),
        }
    }
}

impl FromStr for Primary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            Ok(Primary::Random)
        } else {
            s.parse().map(Primary::Metric)
        }
    }
}

impl TryFrom<String> for Primary {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Primary> for String {
    fn from(p: Primary) -> String {
        p.to_string()
    }
}

/// Primary score, optional tie-breaker, and the seed used by the random policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub primary: Primary,
    #[serde(default)]
    pub tie_breaker: Option<MetricId>,
    #[serde(default)]
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn metric(primary: MetricId, tie_breaker: Option<MetricId>) -> Self {
        SelectionPolicy {
            primary: Primary::Metric(primary),
            tie_breaker,
            seed: 0,
        }
    }

    pub fn random(seed: u64) -> Self {
        SelectionPolicy {
            primary: Primary::Random,
            tie_breaker: None,
            seed,
        }
    }

    /// Parses `random`, `<metric>` or `<metric>+<tie-breaker>`, e.g. `Var+MaxP`.
    pub fn from_spec(spec: &str, seed: u64) -> Result<Self> {
        let mut parts = spec.split('+');
        let primary: Primary = parts.next().unwrap_or_default().trim().parse()?;
        let tie_breaker = parts.next().map(|t| t.trim().parse::<MetricId>()).transpose()?;
        if parts.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "policy {spec:?} has more than one tie-breaker"
            )));
        }
        let p = SelectionPolicy {
            primary,
            tie_breaker,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.primary, self.tie_breaker) {
            (Primary::Random, Some(_)) => Err(Error::InvalidArgument("the random policy takes no tie-breaker".into())),
            (Primary::Metric(p), Some(t)) if p == t => Err(Error::InvalidArgument(format!(
                "tie-breaker must differ from the primary metric ({p})"
            ))),
            _ => Ok(()),
        }
    }

    /// Metrics that must be computed to apply this policy.
    pub fn metrics(&self) -> Vec<MetricId> {
        let mut v = Vec::new();
        if let Primary::Metric(m) = self.primary {
            v.push(m);
        }
        v.extend(self.tie_breaker);
        v
    }

    /// Short label such as `Var+MaxP` or `random`.
    pub fn label(&self) -> String {
        match self.tie_breaker {
            Some(t) => format!("{}+{t}", self.primary),
            None => self.primary.to_string(),
        }
    }
}

fn uncertainty_cmp(s: &ScoreVector, a: usize, b: usize) -> Ordering {
    let ord = s.values[a].total_cmp(&s.values[b]);
    match s.orientation {
        Orientation::HighIsUncertain => ord.reverse(),
        Orientation::LowIsUncertain => ord,
    }
}

/// Most-uncertain-first permutation. Exact ties on `primary` fall to
/// `tie`, then to the original index.
pub fn rank_inputs(primary: &ScoreVector, tie: Option<&ScoreVector>) -> Result<Vec<usize>> {
    if let Some(t) = tie {
        if t.len() != primary.len() {
            return Err(Error::shape("rank_inputs tie-breaker", primary.len(), t.len()));
        }
    }
    let mut idx: Vec<usize> = (0..primary.len()).collect();
    idx.sort_by(|&a, &b| {
        uncertainty_cmp(primary, a, b)
            .then_with(|| tie.map_or(Ordering::Equal, |t| uncertainty_cmp(t, a, b)))
            .then(a.cmp(&b))
    });
    Ok(idx)
}

/// Seeded permutation of `0..n`.
pub fn random_ranking(n: usize, seed: u64) -> Vec<usize> {
    seeded_shuffle(n, &mut child_rng(seed, "random-policy", 0))
}

/// Parameters of the retraining simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainConfig {
    /// Random pool items in the first training set (N0).
    pub initial_size: usize,
    /// Items added per iteration (B).
    pub batch_size: usize,
    /// Training epochs per iteration (E); overrides `train.epochs`.
    pub epochs_per_iteration: usize,
    /// Independent repetitions (R).
    pub repetitions: usize,
    pub policy: SelectionPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kde: KdeConfig,
    /// Monte-Carlo passes when scoring the pool.
    pub k: usize,
    /// Continue from the previous iteration's weights instead of re-initializing.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            initial_size: 1000,
            batch_size: 500,
            epochs_per_iteration: 50,
            repetitions: 5,
            policy: SelectionPolicy::random(0),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kde: KdeConfig::default(),
            k: DEFAULT_MC_PASSES,
            warm_start: false,
            seed: 0,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        self.policy.validate()?;
        if self.initial_size == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("initial and batch sizes must be >= 1".into()));
        }
        if self.initial_size + self.batch_size > pool_size {
            return Err(Error::InvalidArgument(format!(
                "initial size {} + batch size {} exceeds the pool ({pool_size})",
                self.initial_size, self.batch_size
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidArgument("repetitions must be >= 1".into()));
        }
        if self.epochs_per_iteration == 0 {
            return Err(Error::InvalidArgument("epochs per iteration must be >= 1".into()));
        }
        self.train.validate()
    }

    /// Number of iterations including iteration 0.
    pub fn iterations(&self, pool_size: usize) -> usize {
        1 + (pool_size.saturating_sub(self.initial_size)).div_ceil(self.batch_size)
    }
}

/// One training round within a repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_size: usize,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    /// Holdout accuracy after every epoch.
    pub val_accuracy: Vec<f64>,
    /// Pool indices added to the training set before this iteration.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionTrace {
    pub repetition: usize,
    pub seed: u64,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainTrace {
    pub policy: SelectionPolicy,
    pub train_sizes: Vec<usize>,
    /// Median test accuracy over repetitions, per iteration.
    pub median_accuracy: Vec<f64>,
    pub repetitions: Vec<RepetitionTrace>,
}

impl RetrainTrace {
    /// Median over repetitions of the accuracy gain from iteration 0 to `iteration`.
    pub fn median_gain(&self, iteration: usize) -> Result<f64> {
        let gains: Vec<f64> = self
            .repetitions
            .iter()
            .map(|r| {
                r.iterations
                    .get(iteration)
                    .map(|it| it.test_accuracy - r.iterations[0].test_accuracy)
                    .ok_or_else(|| Error::InvalidArgument(format!("no iteration {iteration}")))
            })
            .collect::<Result<_>>()?;
        median(&gains)
    }
}

/// Runs `cfg.repetitions` independent selection simulations.
pub fn retrain_loop(pool: &Dataset, test: &Dataset, cfg: &RetrainConfig) -> Result<RetrainTrace> {
    cfg.validate(pool.len())?;
    if pool.dim() != test.dim() || pool.n_classes != test.n_classes {
        return Err(Error::shape(
            "retrain pool/test",
            format!("dim {} with {} classes", pool.dim(), pool.n_classes),
            format!("dim {} with {} classes", test.dim(), test.n_classes),
        ));
    }
    let repetitions = (0..cfg.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(pool, test, cfg, rep))
        .collect::<Result<Vec<_>>>()?;

    let n_iter = repetitions[0].iterations.len();
    let median_accuracy = (0..n_iter)
        .map(|it| {
            let accs: Vec<f64> = repetitions.iter().map(|r| r.iterations[it].test_accuracy).collect();
            median(&accs)
        })
        .collect::<Result<_>>()?;
    Ok(RetrainTrace {
        policy: cfg.policy,
        train_sizes: repetitions[0].iterations.iter().map(|i| i.train_size).collect(),
        median_accuracy,
        repetitions,
    })
}

fn run_repetition(pool: &Dataset, test: &Dataset, cfg: &RetrainConfig, rep: usize) -> Result<RepetitionTrace> {
    let rep_seed = derive_seed(cfg.seed, "retrain-rep", rep as u64);
    let order = seeded_shuffle(pool.len(), &mut child_rng(rep_seed, "initial", 0));
    let mut train_idx: Vec<usize> = order[..cfg.initial_size].to_vec();
    let mut remaining: Vec<usize> = order[cfg.initial_size..].to_vec();
    remaining.sort_unstable();
    let arch = cfg.model.architecture(pool.dim(), pool.n_classes);
    let metrics = cfg.policy.metrics();

    let mut iterations = Vec::new();
    let mut selected = train_idx.clone();
    let mut previous: Option<MlpModel> = None;
    for it in 0.. {
        let train_set = pool.subset(&train_idx, Split::Train)?;
        let tcfg = TrainConfig {
            epochs: cfg.epochs_per_iteration,
            seed: derive_seed(rep_seed, "train", it as u64),
            ..cfg.train.clone()
        };
        let warm = if cfg.warm_start { previous.as_ref() } else { None };
        let (model, history) = train_with_history(&train_set, &arch, &tcfg, warm)?;
        iterations.push(IterationRecord {
            iteration: it,
            train_size: train_idx.len(),
            test_accuracy: model.accuracy(test)?,
            best_epoch: history.best_epoch,
            val_accuracy: history.val_accuracy,
            selected: std::mem::take(&mut selected),
        });
        if remaining.is_empty() {
            break;
        }

        let take = cfg.batch_size.min(remaining.len());
        let ranking = match cfg.policy.primary {
            Primary::Random => random_ranking(
                remaining.len(),
                derive_seed(cfg.policy.seed, "select", ((rep as u64) << 32) | it as u64),
            ),
            Primary::Metric(primary) => {
                let candidates = pool.subset(&remaining, Split::Pool)?;
                let reference = if metrics.iter().any(|m| m.needs_training_activations()) {
                    Some(SurpriseReference::build(&model, &train_set.features, &cfg.kde)?)
                } else {
                    None
                };
                let req = ScoreRequest {
                    metrics: &metrics,
                    k: cfg.k,
                    seed: derive_seed(rep_seed, "mc", it as u64),
                    reference: reference.as_ref(),
                };
                let scored = score_inputs(&model, &candidates.features, &req).map_err(|e| match e {
                    Error::Scoring { index, reason } => Error::Scoring {
                        index: remaining[index],
                        reason: format!("repetition {rep}, iteration {it}: {reason}"),
                    },
                    other => other,
                })?;
                let tie = cfg.policy.tie_breaker.map(|t| scored.get(t)).transpose()?;
                rank_inputs(scored.get(primary)?, tie)?
            }
        };
        selected = ranking[..take].iter().map(|&r| remaining[r]).collect();
        train_idx.extend_from_slice(&selected);
        let mut chosen = vec![false; remaining.len()];
        for &r in &ranking[..take] {
            chosen[r] = true;
        }
        remaining = remaining
            .iter()
            .zip(&chosen)
            .filter(|(_, &c)| !c)
            .map(|(&i, _)| i)
            .collect();
        previous = Some(model);
    }
    Ok(RepetitionTrace {
        repetition: rep,
        seed: rep_seed,
        iterations,
    })
}
