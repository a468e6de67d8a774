//! Desk-scale conditional GAN laboratory.
//!
//! The generator is a two-stage pipeline (conditioning augmentation, an
//! initial MLP stage, and a key-value memory refinement stage) trained
//! against one two-headed discriminator per stage. The generator objective
//! combines adversarial, conditioning-augmentation, matching and
//! mode-seeking terms; [`metrics`] measures how many ground-truth modes of
//! a synthetic conditional mixture the generator recovers.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
