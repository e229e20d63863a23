//! Two-stage radio-map reconstruction: a conditional U-Net for the initial
//! estimate and a diffusion U-Net that refines it.

pub mod condmodel;
pub mod diffmodel;
mod error;
mod layers;
pub mod toy;
pub mod trainer;

pub use condmodel::{cond_input, loss_cond, CondLossTerms, CondNet, CondOutput, LossWeights};
pub use diffmodel::{ancestral_sample, anchor_fuse, corrupt, loss_diff, make_schedule, rf_sa, DiffNet, NoiseSchedule};
pub use error::{Error, Result};
pub use trainer::{
    ablation, evaluate, load_model, run_training, train, train_step, ModelConfig, RadioMapModel, TrainConfig,
    TrainState, Variant,
};
