//! A small, dependency-light GPT-style transformer whose feed-forward slot can
//! be filled by a ReLU MLP, a LoRA-adapted MLP, a KAN (B-spline) network, a
//! hybrid KAN with a low-rank adapter on its base path, a multi-head graph
//! attention layer, or a graph attention layer with low-rank adapted head
//! weights. Everything runs on the CPU on top of the crate's own reverse-mode
//! autodiff engine.

pub mod battery;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gat;
pub mod gradcheck;
pub mod kan;
pub mod logging;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{no_grad, Real, Tensor};
