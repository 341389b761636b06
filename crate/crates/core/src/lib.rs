pub mod alignment;
pub mod autodiff;
mod bytes;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fixtures;
pub mod imaging;
pub mod inr;
pub mod inversion;
pub mod optim;
pub mod robust_init;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
