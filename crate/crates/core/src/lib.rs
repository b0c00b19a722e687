pub mod commands;
pub mod config;
pub mod error;
pub mod fft;
pub mod edge;
pub mod geometry;
pub mod gmrf;
pub mod influence;
pub mod likelihood;
pub mod mcmc;
pub mod pool;
pub mod linalg;
pub mod quad;
pub mod simulate;
pub mod sparse;
pub mod study;
pub mod summaries;

pub use error::{Error, Result};
