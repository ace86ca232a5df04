//! Masked diffusion transformer for generating 3D gesture sequences from
//! audio, text, speaker and emotion conditions.

pub mod checkpoint;
pub mod cli;
pub mod conditions;
pub mod diffusion;
pub mod error;
pub mod gesture_data;
pub mod mdt;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
