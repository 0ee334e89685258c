//! Cross-view geo-localization with geometric layout descriptors.
//!
//! A ground panorama and an aerial image are each encoded by a small CNN
//! backbone into raw features; a transformer-based layout extractor turns the
//! features into `K` bounded layout descriptors, and the embedding is the set
//! of inner products between descriptors and feature channels. Training uses
//! an exhaustive soft-margin triplet loss plus a counterfactual term that
//! pushes embeddings built from random descriptors away from the real one.

pub mod autograd;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod features;
pub mod imaging;
pub mod layout;
pub mod losses;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod tensor_io;
pub mod training;
pub mod viz;

pub use config::RunConfig;
pub use error::{Error, Result};
