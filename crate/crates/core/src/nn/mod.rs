//! Small double-precision neural-network engine: dense layers,
//! activations, dropout, losses, AdamW, gradient clipping, finite-difference
//! gradient checks, a flat model file format, and the shared mini-batch
//! training loop used by both predictors.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod train;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, Objective};
pub use io::ModelFile;
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use params::{ParamSet, Tensor};
