//! Dense feed-forward classifier: inference with activation traces, reverse-mode
//! gradients, and SGD training.

mod backprop;
mod conv;
mod layer;
mod loss;
mod model;
mod train;

pub use backprop::{
    grad_input, loss_and_gradients, loss_and_input_gradient, train_batch_loss, train_batch_param_gradient,
    Gradients, LayerGrad, BN_MOMENTUM,
};
pub use conv::{conv_output_len, conv_output_shape};
pub use layer::{Activation, BatchNormParams, Layer, LayerKind};
pub use loss::{cross_entropy, softmax, softmax_cross_entropy, PROB_FLOOR};
pub use model::{ActivationHook, ActivationTrace, Model, NoHook};
pub use train::{accuracy, predict_all, train_sgd, SgdConfig, TrainReport};
