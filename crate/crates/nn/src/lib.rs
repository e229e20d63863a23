//! Minimal dense-tensor neural network kernels with a reverse-mode tape.

pub mod checkpoint;
pub mod conv;
mod error;
pub mod fft;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use conv::ConvGeometry;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ModelParams, ParamBlock};
pub use tape::{Tape, Var};
pub use tensor::Tensor4;
