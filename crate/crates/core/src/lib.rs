//! Task-conditioned LoRA parameter generation.
//!
//! The pipeline fine-tunes LoRA adapters for a family of synthetic tasks on a
//! small decoder-only transformer, harvests the trailing checkpoints of each
//! run, and trains a convolutional conditional VAE that maps a task vector and
//! Gaussian noise back to a usable adapter.

pub mod bench;
pub mod cli;
pub mod config;
pub mod container;
pub mod cvae;
pub mod data;
pub mod error;
pub mod harvest;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod task_vector;
pub mod tensor;

pub use error::{Error, Result};
