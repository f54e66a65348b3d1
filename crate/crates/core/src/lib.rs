pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod subword;
pub mod trainer;

pub use error::{Error, Result};
