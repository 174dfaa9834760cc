//! Artifact files, run configuration, pipeline stages and reporting for the
//! latent-barrier imitation stack in `lpb-core`.

pub mod artifact;
pub mod codec;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
pub use lpb_core;
