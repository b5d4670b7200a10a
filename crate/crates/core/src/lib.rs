pub mod analytics;
pub mod calibration;
pub mod crf;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
