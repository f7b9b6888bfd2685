//! Diffusion bridges that map pathological images to pseudo-healthy ones.
//!
//! The crate covers the full desk-scale pipeline: closed-form noise
//! schedules and bridge kernels ([`schedules`], [`sde`]), a small
//! data-prediction network with its own reverse-mode differentiation
//! ([`autodiff`], [`network`]), bridge and baseline score-matching training
//! ([`training`]), implicit and SDE samplers ([`sampling`]), procedural
//! paired phantoms with the BTEN tensor container ([`synthdata`], [`bten`]),
//! anomaly/segmentation metrics ([`evaluation`]), flat-file run
//! configuration and checkpoints ([`config`], [`checkpoint`]), known-answer
//! toys and verification suites ([`toy`], [`oracle`]) and the end-to-end toy
//! benchmark ([`benchmark`]).

pub mod autodiff;
pub mod benchmark;
pub mod bten;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod sampling;
pub mod schedules;
pub mod sde;
pub mod synthdata;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use schedules::{BridgeCoefficients, NoiseSchedule, ScheduleKind};
pub use tensor::Tensor;
