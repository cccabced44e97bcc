//! Flow-based image priors and denoisers trained without paired data.
//!
//! Stage one fits a normalizing flow to clean patches by maximum likelihood.
//! Stage two freezes the flow and trains a residual CNN on noisy patches
//! with a blurred-fidelity term plus the flow's negative log-likelihood.

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
