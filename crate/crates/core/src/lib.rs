pub mod cli;
pub mod dataset;
pub mod diagnet;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod synthcohort;
pub mod training;

pub use error::{Error, Result};
