mod checksum;
pub mod cli;
pub mod error;
pub mod image;
mod kv;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
mod parallel;
pub mod rng;
pub mod synthdata;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use rng::RngStream;
