//! Normative organ shape modelling from 3D binary segmentation masks.

pub mod augment;
pub mod cli;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
