pub mod diffcore;
pub mod distributions;
pub mod error;
pub mod datasets;
pub mod hvae;
pub mod metrics;
pub mod selection;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
