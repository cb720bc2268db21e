//! Low-resolution factorized radiance fields with a convolutional
//! super-resolution head.
//!
//! The pipeline renders a vector-matrix factorized field at low resolution
//! and upscales the result with a small residual network; both halves are
//! trained end to end on aligned LR/HR patch pairs. Everything is f64 on the
//! CPU with hand-written gradients, so analytic backward passes can be
//! checked against finite differences.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod io;
pub mod renderer;
pub mod rng;
pub mod sampling;
pub mod sr;
pub mod training;

pub use error::{Error, Result};
