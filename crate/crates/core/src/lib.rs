//! River water segmentation and width estimation from temporal stacks of
//! low-resolution multispectral imagery.
//!
//! The crate is organised bottom-up:
//!
//! - [`raster`]: grid geometry, image containers, resampling and the on-disk raster format
//! - [`ingest`]: pairing high-resolution labels with low-resolution time series
//! - [`synth`]: a parametric river-scene generator with known ground truth
//! - [`model`]: the trainable spectral adaptor + U-shaped segmentation network
//! - [`fusion`]: the three multi-frame prediction strategies
//! - [`trainer`]: loss, optimiser, learning-rate/epoch selection and evaluation
//! - [`width`]: transect-based river width estimation
//! - [`metrics`]: segmentation and width metrics, cloud-stratified gains, report emission
//! - [`experiment`]: the end-to-end benchmark used by `rivolution repro`

pub mod error;
pub mod experiment;
pub mod fusion;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synth;
pub mod trainer;
pub mod width;

pub use error::{Error, Result};
