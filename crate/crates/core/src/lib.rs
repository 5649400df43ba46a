//! Multi-expert image-to-report transformer built on a small reverse-mode
//! autodiff engine, with training, evaluation and diagnostic tooling.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objectives;

pub use error::{Error, Result};
