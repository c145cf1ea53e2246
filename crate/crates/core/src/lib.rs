//! Depth-prompted semantic segmentation of land-cover imagery.

pub mod adapter;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod depth;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompter;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
