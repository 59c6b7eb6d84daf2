//! Self-swap guidance laboratory.
//!
//! A small transformer ε-predictor trained on procedural shapes, two
//! discrete samplers, guidance combinators (classifier-free, self-swap and
//! two simplified baselines), desk-scale distribution metrics and the
//! experiment harness behind the `ssg-lab` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod guidance;
pub mod image;
pub mod metrics;
pub mod rng;
pub mod swap;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use rng::RngStream;
pub use tensor::{Matrix, TokenTensor};
