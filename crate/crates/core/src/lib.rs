pub mod association;
pub mod augment;
pub mod crs;
pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod ingest;
pub mod pairing;
pub mod raster;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
