//! Generalized zero-shot learning with a conditional VAE whose generator is
//! trained with feedback from an attribute regressor.
//!
//! The pipeline: [`trainer`] fits the encoder, generator and regressor of
//! [`networks`] on seen-class data using the losses in [`objectives`];
//! [`synthesis`] draws labeled exemplars for any class from its attribute
//! vector; [`classify`] fits an ordinary classifier on them; [`protocol`] runs
//! the ZSL/GZSL evaluations on datasets from [`data`].

pub mod classify;
pub mod data;
pub mod error;
mod framing;
pub mod networks;
pub mod objectives;
pub mod protocol;
pub mod rng;
pub mod synthesis;
pub mod trainer;

pub use error::{CheckpointError, ContainerError, Error, Result};
