//! Link-level simulator and detector library for grant-free MUSA uplink
//! multi-user detection.
//!
//! The crate covers the full experiment chain: complex spreading codebook
//! generation and selection ([`codebook`]), received-pilot synthesis under
//! path loss, shadowing and Rayleigh fading ([`channel`], [`sim`]), a small
//! feedforward network engine with batch normalization, dropout and Adam
//! ([`nn`]), sparse-recovery detectors and a neural detector ([`detect`]),
//! confusion-matrix metrics ([`metrics`]) and an orchestration pipeline with
//! a CLI ([`pipeline`]).
//!
//! All numeric core code is generic over the real scalar type through the
//! [`scalar::Scalar`] trait; `f64` aliases are exported at the crate root
//! and are what the CLI uses.

pub mod codebook;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default real scalar used by the CLI and pipeline.
pub type Real = f64;
/// Complex number over the default scalar.
pub type C = num_complex::Complex<Real>;

pub type SpreadingMatrix = codebook::SpreadingMatrix<Real>;
pub type SpreadingMatrix32 = codebook::SpreadingMatrix<f32>;
pub type ChannelParams = channel::ChannelParams<Real>;
pub type Snapshot = sim::Snapshot<Real>;
pub type Dataset = dataset::Dataset;
pub type MlpModel = nn::MlpModel<Real>;
pub type TrainConfig = nn::TrainConfig<Real>;
pub type DetectionResult = detect::DetectionResult<Real>;
