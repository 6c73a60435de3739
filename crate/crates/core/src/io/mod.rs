//! File formats and run configuration.

pub mod checkpoint;
pub mod config;
pub mod ppm;
