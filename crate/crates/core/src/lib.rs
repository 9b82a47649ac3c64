//! Test-input selection for classifiers by model uncertainty and surprise.

// Range checks are written as negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod stats;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use model::{mc_predict_proba, train, Architecture, Dataset, MlpModel, ProbTensor, TrainConfig};
pub use tensor::Matrix;
