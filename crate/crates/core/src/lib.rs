//! Q-Former vision-language GUI agent with adaptive feature renormalization.
//!
//! The pipeline: a patch-transformer image encoder feeds a Q-Former whose
//! query tokens are then modulated per token (scale and shift predicted from
//! image features), optionally refined by a second high-resolution pass over
//! horizontal crops, projected into a small causal action decoder.

pub mod ablation;
pub mod actions;
pub mod afr;
pub mod agent;
pub mod costmodel;
mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod layers;
pub mod numerics;
pub mod qformer;
pub mod synthgui;
pub mod vision;

pub use error::{Error, Result};
