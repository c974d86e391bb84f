//! Minimal differentiable building blocks: a single-use reverse-mode tape,
//! dense / convolution / attention layers, SGD over named parameter stores
//! and a plain binary checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_params, save_params};
pub use error::{NnError, Result};
pub use layers::{Activation, LayerKind, LayerSpec};
pub use params::{sync_copy, ParamStore};
pub use tape::{softmax, Tape, Var};
pub use tensor::Tensor;
