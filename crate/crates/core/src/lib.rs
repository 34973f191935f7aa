//! Instruction generation for two-image fetch-and-carry tasks.

pub mod autograd;
pub mod datasets;
pub mod decoder;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod qformer;
pub mod training;

pub use error::{Error, Result};
