//! Cross-modality video re-identification on synthetic data, with a small
//! reverse-mode autodiff engine underneath.

pub mod ablation;
pub mod cpc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod mii;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
