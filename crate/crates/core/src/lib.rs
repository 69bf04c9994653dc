pub mod data;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
