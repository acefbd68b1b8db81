//! Radiograph decomposition into bone projections with a hierarchical
//! conditional GAN, and bone mineral density estimation from the decomposed
//! image, exercised on synthetic phantoms with exact ground truth.

pub mod bmd;
pub mod cli;
pub mod config;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
