pub mod diff;
pub mod error;
pub mod flows;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod samplers;
pub mod targets;
pub mod training;

pub use error::{Error, Result};
