//! Diffusion-policy imitation with latent-space steering toward expert data.
//!
//! This crate is `no_std` (with `alloc`) and holds every algorithm: the
//! tensor/autodiff substrate, the PointPush environment, the diffusion policy,
//! the latent dynamics model, rollout curation, the expert-latent barrier and
//! the evaluation harness. File formats, configuration and the CLI live in the
//! `lpb` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod agent;
pub mod barrier;
pub mod diffusion;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod fnv;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod real;
pub mod recon;
pub mod rollout;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
