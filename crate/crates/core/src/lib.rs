//! Class-incremental semantic segmentation with data-free replay.

pub mod aggregation;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod inversion;
pub mod maps;
pub mod numcore;
pub mod persist;
pub mod protocol;
pub mod rng;
pub mod segnet;

pub use error::{Error, Result};
