//! Desk-scale audio-visual speech recognition with cross-modal attention
//! refinement and video temporal-dynamics auxiliary losses.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod refine;
pub mod synth;
pub mod temporal;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
