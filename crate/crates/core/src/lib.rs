//! Latent diffusion for physically bounded gridded fields.
//!
//! The crate covers the full pipeline: synthetic bounded fields and their
//! binary container ([`grid`]), a small reverse-mode autodiff engine
//! ([`autodiff`]), Gaussian and censored-Gaussian likelihoods
//! ([`distributions`]), the variance-preserving diffusion process
//! ([`diffusion`]) with its training and sampling noise schedules
//! ([`schedulers`]), masked convolutional networks ([`models`]), the
//! probability-flow ODE sampler ([`sampler`]), evaluation metrics
//! ([`metrics`]) and end-to-end training drivers ([`pipeline`]).

pub mod autodiff;
pub mod diffusion;
pub mod distributions;
mod error;
mod fft;
pub mod grid;
pub mod metrics;
pub mod models;
pub mod par;
pub mod pipeline;
pub mod sampler;
pub mod schedulers;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
