pub mod augment;
pub mod config;
pub mod autograd;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod patch;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
