pub mod attention;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod proposals;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
