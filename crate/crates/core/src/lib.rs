pub mod commands;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod scene;
pub mod segmentation;
pub mod train;

pub use error::{Error, Result};
