//! Dual intent and entity transformer.
//!
//! Joint intent classification and entity recognition over a shared
//! relative-position transformer, with a CRF entity head, dot-product
//! similarity heads for intents and masked tokens, and the training and
//! evaluation routines around them.

pub mod data;
mod error;
pub mod evaluation;
pub mod featurizer;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod training;

pub use error::{DietError, Result};
