pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod hwproxy;
pub mod model;
pub mod protocol;
pub mod quant;
pub mod superkernel;

pub use error::{Error, Result};
