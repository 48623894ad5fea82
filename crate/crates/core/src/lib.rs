pub mod degradations;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod imagestack;
pub mod metrics;
pub mod nn;
pub mod phinet;
pub mod priors;

pub use error::{Error, Result};
