//! Rectangular self-calibration segmentation decoder on a small reverse-mode
//! tensor engine.

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod io;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Graph, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::ops::NormMode;
pub use tensor::tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
