//! Promptable human mesh recovery at desk scale.
//!
//! Given an image (or image sequence) and per-person spatial/semantic
//! prompts, the model regresses parametric body pose, shape, and metric
//! camera-space translation, with optional two-person interaction
//! modeling, temporal decoding, and world-coordinate motion output.
//!
//! The numeric core is generic over the scalar type (f32/f64, see
//! [`scalar::Scalar`]); concrete aliases for the default pipeline live at
//! the crate root.

pub mod adam;
pub mod archive;
pub mod body;
pub mod camera;
pub mod error;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod so3;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training/runtime scalar.
pub type Real = f32;
/// Scalar used by gradient checks and geometry oracles.
pub type Wide = f64;

pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
