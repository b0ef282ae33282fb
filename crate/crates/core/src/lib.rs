//! Edge-based direct visual odometry for RGB-D cameras.

pub mod camera;
pub mod dataset;
pub mod edges;
pub mod error;
pub mod evaluation;
pub mod fields;
pub mod grid;
pub mod pipeline;
pub mod registration;
pub mod synthetic;

pub use error::{Error, Result};
