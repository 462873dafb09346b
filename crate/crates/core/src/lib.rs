//! Road-network reconstruction from 2D density rasters.
//!
//! A density field (a segmented image, or a blurred grayscale of a raw
//! image) is read as a terrain. Its mountain ridges, selected by
//! persistence, form the reconstructed graph. Around that core the crate
//! provides raster IO, arc-intensity pruning, tip enhancement, graph
//! similarity metrics (APLS and average Hausdorff distance), SVG overlays,
//! and an iterative self-labelling loop that drives an external segmenter.

pub mod enhance;
pub mod error;
pub mod metrics;
pub mod morse;
pub mod netgraph;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod synth;
pub mod topology;

pub use error::{Error, Result};
pub use netgraph::{BinaryMask, GeoGraph};
pub use raster::{DensityField, RgbRaster};
