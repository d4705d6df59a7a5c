//! Appearance-hallucinating, occlusion-robust neural radiance fields.
//!
//! A static radiance field is conditioned on a per-image appearance vector
//! produced by a convolutional encoder, while a 2D visibility field with
//! per-image transient embeddings down-weights pixels covered by occluders.
//! Everything runs on the CPU in double precision on top of a small
//! reverse-mode differentiation engine ([`diffcore`]).

pub mod appearance;
pub mod cameras;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod field;
pub mod imaging;
mod init;
pub mod metrics;
pub mod occlusion;
pub mod renderer;
pub mod trainer;

pub use diffcore::{Array, ParameterSet};
pub use error::{Error, Result};
