//! Desk-scale multimodal transformer kit.
//!
//! A frozen patch encoder with a trainable query ladder, a two-layer
//! vision-language adapter and a frozen causal decoder whose every linear
//! projection carries modality-routed low-rank adapters. Everything runs in
//! 64-bit floats on a small reverse-mode autodiff tape.

pub mod data;
pub mod decoder;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod mmlora;
pub mod modality;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
