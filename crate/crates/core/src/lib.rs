//! Remote photoplethysmography from video, end to end: spatio-temporal
//! pulse-extraction networks trained with a negative-Pearson loss, plus the
//! downstream pulse pipeline (filtering, peak detection, inter-beat
//! intervals, heart rate and HRV features) and an evaluation harness.

pub mod error;
pub mod eval;
pub mod hrv;
pub mod models;
pub mod nn;
pub mod pulse;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
