//! Landmark-guided embeddings for re-identification of individuals.

pub mod config;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod geometry;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod raster;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
