//! MultiFuser: a bi-decomposed multimodal fusion transformer for driver
//! action recognition, built on a small reverse-mode tensor engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decompose;
pub mod error;
pub mod experiment;
pub mod integration;
pub mod model;
pub mod nn;
pub mod paf;
pub mod params;
pub mod patch;
pub mod suite;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
