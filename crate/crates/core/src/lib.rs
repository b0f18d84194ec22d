//! Evolutionary expectation maximization (EEM) for generative models with
//! binary latents.
//!
//! Truncated posteriors are represented by small per-datapoint sets of latent
//! states which genetic operators improve in every E-step. Noisy-OR, binary
//! sparse coding and spike-and-slab sparse coding are supported, together
//! with patch-based image denoising and inpainting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod evolution;
pub mod imaging;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod state;
pub mod synthetic;
pub mod variational;

pub use data::{DataRow, DataSet};
pub use error::{Error, Result};
pub use model::{GenerativeModel, ModelKind, ModelParams};
pub use state::BinaryState;
