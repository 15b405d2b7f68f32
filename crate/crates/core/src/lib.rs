//! Attention-augmented TransUNet for precipitation and cloud-cover
//! nowcasting, with its baselines, data pipeline, training loop and
//! evaluation suite.

pub mod blocks;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod models;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
