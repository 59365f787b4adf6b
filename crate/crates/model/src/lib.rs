//! GCViT two-stream model, losses, training and cross-validation.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod cv;
pub mod error;
pub mod gcvit;
pub mod loss;
pub mod model;
pub mod params;
pub mod train;

pub use error::{Error, Result};
