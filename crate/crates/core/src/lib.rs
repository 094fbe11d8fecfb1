//! Hypercuboid user representations for next-item recommendation.
//!
//! Users are axis-aligned boxes produced by a sequence encoder, items are
//! points, and preference is a point-to-box distance (smaller is better).

pub mod autodiff;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod geometry;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;
