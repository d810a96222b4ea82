pub mod cli;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod store;

pub use error::{Error, Result};
