//! Minimal deterministic tensor engine: dense NCHW arrays, the layers used by
//! the localization networks, ADAM and checkpoint I/O.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod norm;
pub mod params;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::ConvGeom;
pub use layers::{LayerSpec, Mode, Sequential, Tape};
pub use params::{adam_step, AdamConfig, Grads, ParamStore};
pub use tensor::{Real, Tensor};
