//! Testbed for diffusion-denoised smoothing: a toy multi-task vision stack
//! (classification, segmentation, depth, retrieval) wrapped in a
//! noise/denoise defense, gradient attacks that can differentiate through the
//! denoiser, and a grid runner that evaluates attack x defense x task cells
//! into an append-only record store with report rendering and directional
//! claim checks.
//!
//! Everything runs on CPU in f64 with explicit forward/backward passes, so
//! results are bit-reproducible given the seeds in the experiment config.

pub mod attacks;
pub mod defense;
pub mod error;
pub mod models;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod tasks;

pub use error::{Error, Result};
