//! Radio-map physics and data: grids and scenes, the discrete Helmholtz
//! losses, the log-distance path-loss model, synthetic dataset generation
//! and reconstruction metrics.

pub mod error;
pub mod grid;
pub mod metrics;
pub mod pathloss;
pub mod physics;
pub mod synthgen;

pub use error::{Error, Result};
pub use grid::{denormalize, normalize_db, BinaryMask, DbRange, Grid2D, RawF32Grid, Scene, Transmitter};
pub use metrics::{nmse, rmse, ssim, MetricReport};
pub use physics::{
    laplacian, pinn_losses, pinn_losses_grad, residual, HelmholtzField, HelmholtzSetup, PhysicsConfig, PinnLosses,
    PinnWeights,
};
