//! Minimal deterministic neural-network stack in f64: tensors, the fixed
//! layer set used by the autoencoders and the LSTM baseline, reverse-mode
//! gradients, Adam, and a training loop with learning-rate halving on
//! stalled loss.
//!
//! Everything is seeded and single-threaded per model, so identical seed,
//! config and data give bitwise-identical parameters.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod lstm;
mod rng;
mod sequential;
mod tensor;
mod train;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, NamedTensor, CHECKPOINT_MAGIC};
pub use gradcheck::gradient_check;
pub use layers::{
    conv2d_backward, conv2d_forward, conv_output_size, convtr2d_backward, convtr2d_forward,
    convtr_output_size, elu, elu_grad, relu, Activation, Layer,
};
pub use lstm::Lstm;
pub use rng::DetRng;
pub use sequential::{LayerSpec, Sequential, Stage};
pub use tensor::Tensor;
pub use train::{train_loop, train_network, LossKind, LrSchedule, TrainConfig, TrainHistory};
