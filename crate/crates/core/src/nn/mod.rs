//! Minimal dense neural-network engine: tensors, layers, losses, Adam and
//! finite-difference gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    gradcheck, gradcheck_report, max_relative_error, numeric_gradient, numeric_with_drift,
    GradReport,
};
pub use layers::{BatchNormLayer, DenseLayer, Layer, Mode, ReluLayer};
pub use loss::{
    cross_entropy, entropy_of_bernoulli, l2_loss, log_softmax, nll_loss, softmax, softmax_entropy,
};
pub use network::{Conditioning, Network, ParamSlot};
pub use tensor::Tensor2;
