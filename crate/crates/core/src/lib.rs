pub mod alignment;
pub mod checkpoint;
pub mod coders;
pub mod datasets;
pub mod error;
pub mod harvest;
pub mod lm;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
