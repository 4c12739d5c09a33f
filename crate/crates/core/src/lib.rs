//! Conditional denoising diffusion for longitudinal volume generation.
//!
//! Given a source volume `S` and an interval `delta` (years), the reverse
//! diffusion chain generates the follow-up volume `Y`. The crate covers the
//! noise schedule, forward/posterior/reverse process, an attention UNet
//! noise predictor with additive conditioning, synthetic longitudinal
//! phantoms, training with Adam and the SSIM / Frechet evaluation metrics.

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod training;
pub mod verify;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use schedule::{NoiseSchedule, ScheduleSpec};
pub use volume::{NoiseSample, Volume};
