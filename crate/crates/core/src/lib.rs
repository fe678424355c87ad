pub mod checkpoint;
pub mod curriculum;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod interpretation;
pub mod model;
pub mod nn;
pub mod preprocessing;
pub mod synthetic;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
