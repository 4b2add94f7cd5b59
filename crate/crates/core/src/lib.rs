pub mod augment;
pub mod bottleneck;
pub mod checkpoint;
pub mod config;
pub mod content;
pub mod convert;
pub mod decoder;
pub mod error;
pub mod evalsuite;
pub mod features;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod signal;
pub mod style;
pub mod synth;
pub mod training;
pub mod vocoder;

pub use error::{Error, Result};
