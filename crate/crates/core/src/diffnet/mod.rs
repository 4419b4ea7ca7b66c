//! Minimal dense neural-network toolkit: matrices, a reverse-mode tape,
//! multilayer perceptrons, Adam, and a binary tensor container.

pub mod adam;
pub mod checkpoint;
pub mod matrix;
pub mod mlp;
pub mod tape;

pub use adam::{AdamHyper, AdamState, StoreGrads};
pub use checkpoint::{read_tensors, write_tensors};
pub use matrix::Matrix;
pub use mlp::{HiddenActivation, Layer, MlpSpec, OutputActivation, ParamStore};
pub use tape::{GradientSet, NodeId, ParamKey, Slot, Tape};
