//! Key-value matching for visual information extraction.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod docmodel;
pub mod error;
pub mod gradcheck;
pub mod graphnet;
pub mod heads;
pub mod inference;
pub mod model;
pub mod params;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
