pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod trainer;
pub(crate) mod params;
pub use error::{Error, Result};
