//! Training, transmission, sweeps and file formats on top of `mdvsc-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod frames;
pub mod plot;
pub mod results;
pub mod sweep;
pub mod training;
pub mod transmit;

pub use error::{Error, Result};
pub use mdvsc_core as core;
