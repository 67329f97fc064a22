pub mod config;
pub mod data;
pub mod error;
pub mod image_ops;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
