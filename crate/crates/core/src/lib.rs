//! Prototype-based interpretable sleep staging for single-channel EEG.

pub mod checkpoint;
pub mod data;
pub mod decision;
mod error;
pub mod evaluation;
pub mod features;
pub mod interpret;
pub mod layers;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sensing;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
