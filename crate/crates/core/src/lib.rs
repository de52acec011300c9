pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod preprocess;
pub mod error;
pub mod eval;
pub mod models;
pub mod rng;
pub mod runner;
pub mod supervised;

pub use error::{Error, Result};
