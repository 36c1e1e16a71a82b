//! Minimal reverse-mode autodiff plus SGD and Adam.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{sgd_step, Adam, AdamConfig, SgdConfig};
pub use params::ParamStore;
pub use tape::{cross_entropy, sigmoid, CellWindow, Gradients, Tape, Var, BCE_EPS};
pub use tensor::Tensor;
