//! Unified horizontal/vertical scene-text recognition: aspect-ratio routing,
//! an optional directional encoding mask channel, a convolutional encoder
//! and an attention LSTM decoder with optional per-direction attention heads,
//! all on a small reverse-mode autodiff engine.

pub mod autograd;
pub mod checks;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod persistence;
pub mod routing;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelFlags};
