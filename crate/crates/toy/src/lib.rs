//! A miniature trainable try-on generator.

pub mod checkpoint;
pub mod error;
pub mod infer;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Result, ToyError};
