#![allow(dead_code)]

use dropsel::datasets::{make_blobs, BlobSpec, BlobSplits};
use dropsel::model::{train, Activation, ModelConfig, TrainConfig};
use dropsel::MlpModel;

/// Desk dataset and the default model trained on its train split.
pub fn desk(seed: u64) -> (BlobSplits, MlpModel) {
    let splits = make_blobs(&BlobSpec::desk(seed)).unwrap();
    let data = splits.train().unwrap();
    let arch = ModelConfig::default().architecture(data.dim(), data.n_classes);
    let model = train(
        data,
        &arch,
        &TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    (splits, model)
}

/// Cross-entropy of the deterministic network, evaluated in f64 from the
/// stored f32 weights, with the on/off pattern of the hidden units.
pub fn loss_f64(model: &MlpModel, x: &[f64], label: usize) -> (f64, Vec<bool>) {
    let layers = model.layers();
    let mut h = x.to_vec();
    let mut pattern = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        let mut z: Vec<f64> = layer.bias.iter().map(|&b| f64::from(b)).collect();
        for (i, hi) in h.iter().enumerate() {
            for (zo, &w) in z.iter_mut().zip(layer.weights.row(i)) {
                *zo += hi * f64::from(w);
            }
        }
        if li + 1 < layers.len() {
            for v in &mut z {
                pattern.push(*v > 0.0);
                *v = match model.activation() {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = z;
    }
    let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + h.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - h[label], pattern)
}
