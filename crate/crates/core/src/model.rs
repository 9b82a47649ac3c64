//! Feed-forward classifier with dropout.
//!
//! Dropout is inverted: surviving hidden activations are scaled by `1/(1-r)`
//! during training and Monte-Carlo inference, so deterministic inference
//! needs no rescaling. The output layer is never dropped.
//!
//! Monte-Carlo inference draws one mask per hidden layer per pass and applies
//! it to every input of that pass, so pass `j` is exactly the mutant model
//! `M_j` with a fixed set of neurons removed.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, axpy, child_rng, dot, Matrix};

/// Default dropout rate for mutant generation.
pub const DEFAULT_DROPOUT_RATE: f32 = 0.2;
/// Default number of Monte-Carlo passes.
pub const DEFAULT_MC_PASSES: usize = 50;

const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f32, post: f32) -> f32 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Pool,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Pool => "pool",
        }
    }
}

/// Labelled inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        if labels.len() != features.rows() {
            return Err(Error::shape("dataset labels", features.rows(), labels.len()));
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "a dataset needs at least 2 classes, got {n_classes}"
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at row {i} is out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx`, in that order. `idx` must be non-empty.
    pub fn subset(&self, idx: &[usize], split: Split) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Empty("dataset subset"));
        }
        Ok(Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split,
        })
    }
}

/// Layer sizes, hidden activation and dropout rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[input, hidden..., classes]`
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f32,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, dropout_rate: f32) -> Self {
        Architecture {
            layer_sizes,
            activation: Activation::Relu,
            dropout_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "architecture needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        if *self.layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidArgument("output layer needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Hidden-layer shape and dropout rate, independent of the data's dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f32,
}

impl Default for ModelConfig {
    /// One hidden layer of 128 ReLU units, r = 0.2.
    fn default() -> Self {
        ModelConfig {
            hidden: vec![128],
            activation: Activation::Relu,
            dropout_rate: DEFAULT_DROPOUT_RATE,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, n_classes: usize) -> Architecture {
        let mut layer_sizes = Vec::with_capacity(self.hidden.len() + 2);
        layer_sizes.push(input_dim);
        layer_sizes.extend_from_slice(&self.hidden);
        layer_sizes.push(n_classes);
        Architecture {
            layer_sizes,
            activation: self.activation,
            dropout_rate: self.dropout_rate,
        }
    }
}

/// One dense layer; `weights` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    /// `out = x · W + b` for a single row.
    #[inline]
    fn forward_row(&self, x: &[f32], out: &mut [f32]) {
        out.copy_from_slice(&self.bias);
        for (k, &a) in x.iter().enumerate() {
            if a != 0.0 {
                axpy(a, self.weights.row(k), out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: Architecture,
    layers: Vec<DenseLayer>,
    label_names: Option<Vec<String>>,
    train_seed: Option<u64>,
}

/// Which hidden activations to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    /// Hidden layer by zero-based index.
    Hidden(usize),
    /// The hidden layer closest to the output.
    Deepest,
    /// All hidden layers, concatenated in order.
    AllHidden,
}

impl MlpModel {
    /// Builds a model from explicit parameters.
    pub fn from_layers(arch: Architecture, layers: Vec<DenseLayer>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.layer_sizes.len() - 1 {
            return Err(Error::shape("layer count", arch.layer_sizes.len() - 1, layers.len()));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (fi, fo) = (arch.layer_sizes[l], arch.layer_sizes[l + 1]);
            if layer.fan_in() != fi || layer.fan_out() != fo || layer.bias.len() != fo {
                return Err(Error::shape(
                    "layer shape",
                    format!("{fi}x{fo}"),
                    format!("{}x{} (+{})", layer.fan_in(), layer.fan_out(), layer.bias.len()),
                ));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("bias"));
            }
        }
        Ok(MlpModel {
            arch,
            layers,
            label_names: None,
            train_seed: None,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_sizes
            .windows(2)
            .map(|w| DenseLayer {
                weights: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        MlpModel::from_layers(arch, layers)
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = child_rng(seed, "init", 0);
        let layers = arch
            .layer_sizes
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect();
                DenseLayer {
                    weights: Matrix::from_raw(w[0], w[1], data),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        let mut m = MlpModel::from_layers(arch, layers)?;
        m.train_seed = Some(seed);
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch.layer_sizes[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.arch.layer_sizes.last().unwrap()
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn dropout_rate(&self) -> f32 {
        self.arch.dropout_rate
    }

    pub fn activation(&self) -> Activation {
        self.arch.activation
    }

    pub fn label_names(&self) -> Option<&[String]> {
        self.label_names.as_deref()
    }

    pub fn set_label_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.n_classes() {
            return Err(Error::shape("label names", self.n_classes(), names.len()));
        }
        self.label_names = Some(names);
        Ok(())
    }

    pub fn train_seed(&self) -> Option<u64> {
        self.train_seed
    }

    pub(crate) fn set_train_seed(&mut self, seed: Option<u64>) {
        self.train_seed = seed;
    }

    /// Returns a copy with a different dropout rate (weights unchanged).
    pub fn with_dropout_rate(&self, r: f32) -> Result<Self> {
        let mut arch = self.arch.clone();
        arch.dropout_rate = r;
        arch.validate()?;
        let mut m = self.clone();
        m.arch = arch;
        Ok(m)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("model input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Forward pass over one row. `masks[l]` multiplies hidden layer `l`.
    /// Fills `hidden` with post-activation (post-mask) values and returns logits.
    fn forward_row(&self, x: &[f32], masks: Option<&[Vec<f32>]>, hidden: &mut Vec<Vec<f32>>) -> Vec<f32> {
        hidden.clear();
        let act = self.arch.activation;
        let mut cur: Vec<f32> = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.fan_out()];
            layer.forward_row(&cur, &mut out);
            if l + 1 == self.layers.len() {
                return out;
            }
            for v in out.iter_mut() {
                *v = act.apply(*v);
            }
            if let Some(m) = masks {
                for (v, &s) in out.iter_mut().zip(&m[l]) {
                    *v *= s;
                }
            }
            hidden.push(out.clone());
            cur = out;
        }
        unreachable!("model has at least one layer")
    }

    fn map_rows<F>(&self, x: &Matrix, width: usize, f: F) -> Matrix
    where
        F: Fn(&[f32], &mut Vec<Vec<f32>>) -> Vec<f32> + Sync,
    {
        let n = x.rows();
        let chunks: Vec<Vec<f32>> = (0..n.div_ceil(ROW_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut hidden = Vec::new();
                let mut out = Vec::with_capacity(ROW_CHUNK * width);
                for r in c * ROW_CHUNK..((c + 1) * ROW_CHUNK).min(n) {
                    out.extend(f(x.row(r), &mut hidden));
                }
                out
            })
            .collect();
        Matrix::from_raw(n, width, chunks.concat())
    }

    /// Raw output-layer values, dropout disabled.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.map_rows(x, self.n_classes(), |row, h| self.forward_row(row, None, h)))
    }

    /// Class probabilities with dropout disabled.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        Ok(self.probs_with_masks(x, None))
    }

    fn probs_with_masks(&self, x: &Matrix, masks: Option<&[Vec<f32>]>) -> Matrix {
        self.map_rows(x, self.n_classes(), |row, h| {
            let mut z = self.forward_row(row, masks, h);
            tensor::softmax_in_place(&mut z);
            z
        })
    }

    /// Predicted classes (argmax of [`MlpModel::predict_proba`]).
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.argmax_rows())
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let pred = self.predict(&data.features)?;
        let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Mask for mutant `pass`: one Bernoulli(1-r) draw per hidden neuron,
    /// survivors scaled by `1/(1-r)`.
    pub fn mutant_masks(&self, seed: u64, pass: usize) -> Vec<Vec<f32>> {
        let r = self.arch.dropout_rate;
        let keep = 1.0 - r;
        let scale = 1.0 / keep;
        let mut rng = child_rng(seed, "mc-dropout", pass as u64);
        self.arch.layer_sizes[1..self.arch.layer_sizes.len() - 1]
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Materializes mutant `pass` as a standalone model whose weights carry
    /// the dropout mask. Its `predict_proba` reproduces slice `pass` of
    /// [`mc_predict_proba`] with the same seed.
    pub fn mutant(&self, seed: u64, pass: usize) -> MlpModel {
        let masks = self.mutant_masks(seed, pass);
        let mut m = self.clone();
        for (l, mask) in masks.iter().enumerate() {
            let next = &mut m.layers[l + 1].weights;
            for (k, &s) in mask.iter().enumerate() {
                next.row_mut(k).iter_mut().for_each(|w| *w *= s);
            }
        }
        m.arch.dropout_rate = 0.0;
        m
    }

    /// Post-activation values of the selected hidden layer(s), dropout disabled.
    pub fn activations(&self, x: &Matrix, sel: LayerSel) -> Result<Matrix> {
        self.check_input(x)?;
        let nh = self.n_hidden();
        if nh == 0 {
            return Err(Error::InvalidArgument("model has no hidden layer".into()));
        }
        let layers: Vec<usize> = match sel {
            LayerSel::Hidden(i) if i < nh => vec![i],
            LayerSel::Hidden(i) => {
                return Err(Error::InvalidArgument(format!(
                    "hidden layer {i} out of range (model has {nh})"
                )))
            }
            LayerSel::Deepest => vec![nh - 1],
            LayerSel::AllHidden => (0..nh).collect(),
        };
        let width: usize = layers.iter().map(|&l| self.arch.layer_sizes[l + 1]).sum();
        Ok(self.map_rows(x, width, |row, h| {
            self.forward_row(row, None, h);
            layers.iter().flat_map(|&l| h[l].iter().copied()).collect()
        }))
    }

    /// Gradient of the cross-entropy loss at `(x, label)` with respect to `x`,
    /// dropout disabled.
    pub fn input_gradient(&self, x: &[f32], label: usize) -> Result<Vec<f32>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("input_gradient", self.input_dim(), x.len()));
        }
        if label >= self.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                self.n_classes()
            )));
        }
        let act = self.arch.activation;
        // Keep pre-activations too for the derivative.
        let mut pres: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        let mut posts: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.fan_out()];
            layer.forward_row(&cur, &mut out);
            pres.push(out.clone());
            if l + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            posts.push(out.clone());
            cur = out;
        }
        let mut p = posts.pop().unwrap();
        tensor::softmax_in_place(&mut p);
        let mut delta = output_delta(&p, label);
        for l in (0..self.layers.len()).rev() {
            let w = &self.layers[l].weights;
            let mut up: Vec<f32> = (0..w.rows()).map(|k| dot(w.row(k), &delta)).collect();
            if l > 0 {
                for (u, (&pre, &post)) in up.iter_mut().zip(pres[l - 1].iter().zip(&posts[l - 1])) {
                    *u *= act.derivative(pre, post);
                }
            }
            delta = std::mem::take(&mut up);
        }
        Ok(delta)
    }
}

/// `softmax - onehot(label)`, with the label entry computed as minus the sum
/// of the other probabilities so it stays accurate when `p[label]` rounds to 1.
fn output_delta(p: &[f32], label: usize) -> Vec<f32> {
    let mut d = p.to_vec();
    let rest: f64 = p
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &v)| f64::from(v))
        .sum();
    d[label] = -rest as f32;
    d
}

/// `k × n × C` stack of per-mutant probability matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTensor {
    k: usize,
    n: usize,
    c: usize,
    data: Vec<f32>,
}

impl ProbTensor {
    /// Validates shape and the simplex property of every row.
    pub fn new(k: usize, n: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != k * n * c {
            return Err(Error::shape("ProbTensor", k * n * c, data.len()));
        }
        if k == 0 || c == 0 {
            return Err(Error::Empty("ProbTensor"));
        }
        for (i, row) in data.chunks(c).enumerate() {
            if row.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} of the probability tensor has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "row {i} of the probability tensor sums to {s}"
                )));
            }
        }
        Ok(ProbTensor { k, n, c, data })
    }

    pub fn from_slices(slices: Vec<Matrix>) -> Result<Self> {
        let k = slices.len();
        let first = slices.first().ok_or(Error::Empty("ProbTensor"))?;
        let (n, c) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(k * n * c);
        for s in slices {
            if s.rows() != n || s.cols() != c {
                return Err(Error::shape(
                    "ProbTensor slice",
                    format!("{n}x{c}"),
                    format!("{}x{}", s.rows(), s.cols()),
                ));
            }
            data.extend(s.into_data());
        }
        ProbTensor::new(k, n, c, data)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.k, self.n, self.c]
    }

    /// Probability row of mutant `j` for input `i`.
    pub fn row(&self, j: usize, i: usize) -> &[f32] {
        let off = (j * self.n + i) * self.c;
        &self.data[off..off + self.c]
    }

    pub fn slice(&self, j: usize) -> Matrix {
        let sz = self.n * self.c;
        Matrix::from_raw(self.n, self.c, self.data[j * sz..(j + 1) * sz].to_vec())
    }
}

/// Runs `k` dropout mutants over `x`.
pub fn mc_predict_proba(model: &MlpModel, x: &Matrix, k: usize, seed: u64) -> Result<ProbTensor> {
    model.check_input(x)?;
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "Monte-Carlo dropout needs k >= 2 passes, got {k}"
        )));
    }
    if model.dropout_rate() <= 0.0 {
        return Err(Error::InvalidArgument(
            "dropout rate is 0: mutants would be identical".into(),
        ));
    }
    let slices: Vec<Matrix> = (0..k)
        .into_par_iter()
        .map(|j| {
            let masks = model.mutant_masks(seed, j);
            model.probs_with_masks(x, Some(&masks))
        })
        .collect();
    let (n, c) = (x.rows(), model.n_classes());
    let mut data = Vec::with_capacity(k * n * c);
    for s in slices {
        data.extend(s.into_data());
    }
    Ok(ProbTensor { k, n, c, data })
}

/// Hyperparameters for [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the training split held out for snapshot selection.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument("holdout fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains from a fresh He initialization and returns the best-validation snapshot.
pub fn train(data: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<MlpModel> {
    train_with_history(data, arch, cfg, None).map(|(m, _)| m)
}

/// Like [`train`], optionally starting from `warm` instead of a fresh init,
/// and returning the per-epoch history.
pub fn train_with_history(
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    warm: Option<&MlpModel>,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    arch.validate()?;
    if arch.layer_sizes[0] != data.dim() {
        return Err(Error::shape("train input width", arch.layer_sizes[0], data.dim()));
    }
    if *arch.layer_sizes.last().unwrap() != data.n_classes {
        return Err(Error::shape(
            "train output width",
            data.n_classes,
            arch.layer_sizes.last().unwrap(),
        ));
    }

    let n = data.len();
    let perm = tensor::seeded_shuffle(n, &mut child_rng(cfg.seed, "holdout", 0));
    let n_val = ((n as f64) * cfg.holdout_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let (val_idx, fit_idx) = perm.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let fit_idx = fit_idx.to_vec();
    let val = if val_idx.is_empty() {
        data.clone()
    } else {
        data.subset(&val_idx, Split::Train)?
    };

    let mut model = match warm {
        Some(m) => {
            if m.architecture().layer_sizes != arch.layer_sizes {
                return Err(Error::shape(
                    "warm-start architecture",
                    format!("{:?}", arch.layer_sizes),
                    format!("{:?}", m.architecture().layer_sizes),
                ));
            }
            let mut m = m.clone();
            m.arch = arch.clone();
            m
        }
        None => MlpModel::init(arch.clone(), cfg.seed)?,
    };
    model.train_seed = Some(cfg.seed);

    let mut velocity: Vec<DenseLayer> = model
        .layers
        .iter()
        .map(|l| DenseLayer {
            weights: Matrix::zeros(l.fan_in(), l.fan_out()),
            bias: vec![0.0; l.fan_out()],
        })
        .collect();
    let mut grads = velocity.clone();

    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut history = TrainHistory {
        train_loss: Vec::with_capacity(cfg.epochs),
        val_accuracy: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
    };

    let mut ws = Workspace::default();
    for epoch in 0..cfg.epochs {
        let order = tensor::seeded_shuffle(fit_idx.len(), &mut child_rng(cfg.seed, "epoch", epoch as u64));
        let mut drop_rng = child_rng(cfg.seed, "train-dropout", epoch as u64);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<usize> = batch.iter().map(|&b| fit_idx[b]).collect();
            loss_sum += model.batch_gradient(data, &rows, &mut drop_rng, &mut grads, &mut ws);
            sgd_step(
                &mut model.layers,
                &mut velocity,
                &grads,
                cfg.learning_rate,
                cfg.momentum,
            );
        }
        let loss = loss_sum / fit_idx.len().max(1) as f64;
        let params_finite = model
            .layers
            .iter()
            .all(|l| l.weights.data().iter().chain(&l.bias).all(|v| v.is_finite()));
        if !loss.is_finite() || !params_finite {
            return Err(Error::Diverged { epoch });
        }
        let acc = model.accuracy(&val)?;
        history.train_loss.push(loss);
        history.val_accuracy.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best = model.clone();
            history.best_epoch = epoch;
        }
    }
    Ok((best, history))
}

#[derive(Default)]
struct Workspace {
    pres: Vec<Vec<f32>>,
    posts: Vec<Vec<f32>>,
    masks: Vec<Vec<f32>>,
}

impl MlpModel {
    /// Accumulates the mean cross-entropy gradient over `rows` into `grads`
    /// and returns the summed loss. Each row gets its own dropout mask.
    fn batch_gradient(
        &self,
        data: &Dataset,
        rows: &[usize],
        rng: &mut tensor::Rng,
        grads: &mut [DenseLayer],
        ws: &mut Workspace,
    ) -> f64 {
        for g in grads.iter_mut() {
            g.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
            g.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        let nl = self.layers.len();
        let act = self.arch.activation;
        let r = self.arch.dropout_rate;
        let keep = 1.0 - r;
        let scale = 1.0 / keep;
        let inv_b = 1.0 / rows.len() as f32;
        let mut loss = 0.0f64;

        ws.pres.resize(nl, Vec::new());
        ws.posts.resize(nl, Vec::new());
        ws.masks.resize(nl, Vec::new());
        for &row in rows {
            let x = data.features.row(row);
            // Forward.
            for l in 0..nl {
                let layer = &self.layers[l];
                let mut out = std::mem::take(&mut ws.pres[l]);
                out.resize(layer.fan_out(), 0.0);
                let input: &[f32] = if l == 0 { x } else { &ws.posts[l - 1] };
                layer.forward_row(input, &mut out);
                let mut post = std::mem::take(&mut ws.posts[l]);
                post.clear();
                post.extend_from_slice(&out);
                if l + 1 < nl {
                    let mask = &mut ws.masks[l];
                    mask.clear();
                    for v in post.iter_mut() {
                        let s = if r > 0.0 {
                            if rng.gen::<f32>() < keep {
                                scale
                            } else {
                                0.0
                            }
                        } else {
                            1.0
                        };
                        mask.push(s);
                        *v = act.apply(*v) * s;
                    }
                }
                ws.pres[l] = out;
                ws.posts[l] = post;
            }
            let mut p = ws.posts[nl - 1].clone();
            tensor::softmax_in_place(&mut p);
            let label = data.labels[row];
            loss -= f64::from(p[label].max(1e-30)).ln();
            let mut delta = output_delta(&p, label);
            delta.iter_mut().for_each(|d| *d *= inv_b);

            // Backward.
            for l in (0..nl).rev() {
                let input: &[f32] = if l == 0 { x } else { &ws.posts[l - 1] };
                let g = &mut grads[l];
                axpy(1.0, &delta, &mut g.bias);
                for (k, &a) in input.iter().enumerate() {
                    if a != 0.0 {
                        axpy(a, &delta, g.weights.row_mut(k));
                    }
                }
                if l == 0 {
                    break;
                }
                let w = &self.layers[l].weights;
                let mut up: Vec<f32> = Vec::with_capacity(w.rows());
                for k in 0..w.rows() {
                    let m = ws.masks[l - 1][k];
                    if m == 0.0 {
                        up.push(0.0);
                        continue;
                    }
                    let pre = ws.pres[l - 1][k];
                    let post = act.apply(pre);
                    up.push(dot(w.row(k), &delta) * m * act.derivative(pre, post));
                }
                delta = up;
            }
        }
        loss
    }
}

fn sgd_step(params: &mut [DenseLayer], velocity: &mut [DenseLayer], grads: &[DenseLayer], lr: f32, momentum: f32) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let pairs = p
            .weights
            .data_mut()
            .iter_mut()
            .zip(v.weights.data_mut().iter_mut())
            .zip(g.weights.data())
            .chain(p.bias.iter_mut().zip(v.bias.iter_mut()).zip(&g.bias));
        for ((pw, vw), &gw) in pairs {
            *vw = momentum * *vw - lr * gw;
            *pw += *vw;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn tiny_arch(r: f32) -> Architecture {
        Architecture::new(vec![2, 3, 3], r)
    }

    /// Two Gaussian blobs at (0.25, 0.25) and (0.75, 0.75), sigma 0.05, so the
    /// classes sit ~7 sigma apart along the diagonal.
    pub(crate) fn two_blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::tensor::rng_from_seed(seed);
        let noise = Normal::new(0.0f64, 0.05).unwrap();
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { 0.25 } else { 0.75 };
            for _ in 0..2 {
                data.push((center + noise.sample(&mut rng)) as f32);
            }
            labels.push(c);
        }
        Dataset::new(Matrix::new(n, 2, data).unwrap(), labels, 2, Split::Train).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MlpModel::zeros(tiny_arch(0.2)).unwrap();
        let x = Matrix::new(2, 2, vec![0.3, -1.0, 5.0, 2.0]).unwrap();
        let p = m.predict_proba(&x).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let a = m.activations(&x, LayerSel::Deepest).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = MlpModel::zeros(tiny_arch(0.2)).unwrap();
        assert!(matches!(
            m.predict_proba(&Matrix::zeros(1, 3)),
            Err(Error::Shape { .. })
        ));
        assert!(m.input_gradient(&[0.0; 3], 0).is_err());
        assert!(m.input_gradient(&[0.0; 2], 3).is_err());
    }

    #[test]
    fn activations_match_hand_computation() {
        // hidden = relu(x W1 + b1) with x = (1, -2)
        let w1 = Matrix::new(2, 3, vec![1.0, 0.5, -1.0, 2.0, -0.25, 0.0]).unwrap();
        let b1 = vec![0.5, 0.0, 1.0];
        let w2 = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let m = MlpModel::from_layers(
            Architecture::new(vec![2, 3, 2], 0.2),
            vec![
                DenseLayer { weights: w1, bias: b1 },
                DenseLayer {
                    weights: w2,
                    bias: vec![0.0, 0.0],
                },
            ],
        )
        .unwrap();
        let x = Matrix::new(2, 2, vec![1.0, -2.0, 1.0, -2.0]).unwrap();
        let a = m.activations(&x, LayerSel::Hidden(0)).unwrap();
        // pre = (1*1 + -2*2 + .5, 1*.5 + -2*-.25 + 0, 1*-1 + 0 + 1) = (-2.5, 1.0, 0.0)
        assert_eq!(a.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(a.row(0), a.row(1));
        assert!(m.activations(&x, LayerSel::Hidden(1)).is_err());
    }

    #[test]
    fn rows_are_simplexes_and_deterministic() {
        let m = MlpModel::init(Architecture::new(vec![4, 8, 5], 0.2), 3).unwrap();
        let x = Matrix::new(3, 4, vec![0.1, 0.2, 0.3, 0.4, 0.9, 0.1, 0.0, 0.5, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = m.predict_proba(&x).unwrap();
        for row in p.iter_rows() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(p.row(0), p.row(2));
    }

    #[test]
    fn mc_dropout_preconditions() {
        let m = MlpModel::init(tiny_arch(0.0), 1).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(mc_predict_proba(&m, &x, 5, 0).is_err());
        let m = m.with_dropout_rate(0.2).unwrap();
        assert!(mc_predict_proba(&m, &x, 1, 0).is_err());
        assert!(mc_predict_proba(&m, &x, 2, 0).is_ok());
    }

    #[test]
    fn vanishing_dropout_matches_deterministic_inference() {
        let m = MlpModel::init(Architecture::new(vec![2, 16, 8, 3], 1e-9), 5).unwrap();
        let x = Matrix::new(2, 2, vec![0.2, 0.9, 0.7, 0.1]).unwrap();
        let det = m.predict_proba(&x).unwrap();
        let t = mc_predict_proba(&m, &x, 7, 11).unwrap();
        for j in 0..t.k() {
            for (a, b) in t.slice(j).data().iter().zip(det.data()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mc_dropout_is_deterministic_per_seed() {
        let m = MlpModel::init(Architecture::new(vec![2, 16, 3], 0.2), 5).unwrap();
        let x = Matrix::new(2, 2, vec![0.2, 0.9, 0.7, 0.1]).unwrap();
        let a = mc_predict_proba(&m, &x, 50, 9).unwrap();
        let b = mc_predict_proba(&m, &x, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, mc_predict_proba(&m, &x, 50, 10).unwrap());
    }

    #[test]
    fn single_hidden_neuron_has_two_mask_outcomes() {
        // x -> h = relu(x) -> logits (h, 0). With r = 0.5 the neuron is either
        // dropped (logits (0, 0)) or kept and doubled (logits (2x, 0)).
        let m = MlpModel::from_layers(
            Architecture::new(vec![1, 1, 2], 0.5),
            vec![
                DenseLayer {
                    weights: Matrix::new(1, 1, vec![1.0]).unwrap(),
                    bias: vec![0.0],
                },
                DenseLayer {
                    weights: Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
                    bias: vec![0.0, 0.0],
                },
            ],
        )
        .unwrap();
        let x = Matrix::new(1, 1, vec![0.5]).unwrap();
        let dropped = [0.5f32, 0.5];
        let e = std::f64::consts::E as f32; // logits (1, 0)
        let kept = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let t = mc_predict_proba(&m, &x, 64, 1).unwrap();
        let mut seen = [false; 2];
        for j in 0..t.k() {
            let row = t.row(j, 0);
            let is_dropped = row.iter().zip(&dropped).all(|(a, b)| (a - b).abs() < 1e-6);
            let is_kept = row.iter().zip(&kept).all(|(a, b)| (a - b).abs() < 1e-6);
            assert!(is_dropped ^ is_kept, "unexpected row {row:?}");
            seen[usize::from(is_kept)] = true;
            let mask = m.mutant_masks(1, j);
            assert_eq!(is_kept, mask[0][0] == 2.0);
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn materialized_mutant_matches_tensor_slice() {
        let m = MlpModel::init(Architecture::new(vec![3, 10, 6, 4], 0.3), 2).unwrap();
        let x = Matrix::new(2, 3, vec![0.3, 0.6, 0.9, 0.0, 1.0, 0.5]).unwrap();
        let t = mc_predict_proba(&m, &x, 5, 77).unwrap();
        for j in 0..5 {
            let p = m.mutant(77, j).predict_proba(&x).unwrap();
            for (a, b) in p.data().iter().zip(t.slice(j).data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mean_over_more_mutants_is_more_stable() {
        let m = MlpModel::init(Architecture::new(vec![2, 32, 3], 0.3), 8).unwrap();
        let x = Matrix::new(1, 2, vec![0.4, 0.6]).unwrap();
        let class_means = |k: usize, seed: u64| -> Vec<f64> {
            let t = mc_predict_proba(&m, &x, k, seed).unwrap();
            (0..3)
                .map(|c| (0..k).map(|j| f64::from(t.row(j, 0)[c])).sum::<f64>() / k as f64)
                .collect()
        };
        // Average squared gap between two independent estimates, over several seed pairs.
        let gap = |k: usize| -> f64 {
            (0..20)
                .map(|s| {
                    let (a, b) = (class_means(k, 2 * s), class_means(k, 2 * s + 1));
                    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
        };
        assert!(gap(200) <= gap(10));
    }

    #[test]
    fn zero_output_weights_give_zero_input_gradient() {
        let mut m = MlpModel::init(Architecture::new(vec![3, 5, 4], 0.2), 4).unwrap();
        let last = m.layers.len() - 1;
        m.layers[last].weights = Matrix::zeros(5, 4);
        let g = m.input_gradient(&[0.2, 0.5, 0.1], 1).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_rejects_zero_epochs() {
        let data = two_blobs(20, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&data, &Architecture::new(vec![2, 4, 2], 0.1), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let data = two_blobs(40, 1);
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 3,
            ..TrainConfig::default()
        };
        match train(&data, &Architecture::new(vec![2, 4, 2], 0.0), &cfg) {
            Err(Error::Diverged { epoch }) => assert!(epoch < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn separable_blobs_are_learned_deterministically() {
        let data = two_blobs(500, 42);
        let arch = Architecture::new(vec![2, 16, 2], 0.2);
        let cfg = TrainConfig {
            epochs: 20,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m, hist) = train_with_history(&data, &arch, &cfg, None).unwrap();
        assert!(hist.val_accuracy[hist.best_epoch] >= 0.95);
        let test = two_blobs(200, 43);
        assert!(m.accuracy(&test).unwrap() >= 0.95);
        let again = train(&data, &arch, &cfg).unwrap();
        assert_eq!(m, again);
    }
}
