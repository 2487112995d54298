//! Reference data and experiment drivers behind the `acceptance` target.

pub mod ablation;
pub mod published;
