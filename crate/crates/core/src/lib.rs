//! Adversarial domain adaptation for transformer-based named entity
//! recognition, built on a small reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
