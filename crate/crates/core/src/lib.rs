pub mod config;
pub mod dataset;
pub mod descriptors;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod mapstore;
pub mod relocalizer;
pub mod renderer;
pub mod seed;
pub mod tracking;
pub mod trainer;
pub mod triangulation;
pub mod voxel;

pub use error::{Error, Result};
