pub mod color;
mod error;
pub mod eval;
pub mod h2h;
pub mod haze;
pub mod hsc;
pub mod i2i;
pub mod image;
pub mod metrics;
pub mod orchestrator;
pub mod seed;
pub mod spectral;

pub use error::{Error, Result};
