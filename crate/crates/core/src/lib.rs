//! Differentially private finetuning of linear classification heads over
//! cached features.
//!
//! The crate is organised bottom-up:
//!
//! * [`accountant`]: Rényi-DP accounting for the Poisson-subsampled Gaussian
//!   mechanism and noise calibration for a target `(ε, δ)`.
//! * [`grad`]: forward pass, sigmoid cross-entropy, per-example clipping and
//!   noising for a linear head, without materialising per-example gradients.
//! * [`optim`]: SGD, Momentum, Adam and LAMB consuming privatized gradients,
//!   plus learning-rate schedules.
//! * [`data`]: feature caches, CSV import, synthetic data and batch selection.
//! * [`trainer`]: the end-to-end DP training loop, evaluation and sweeps.
//! * [`config`]: flat `key=value` configuration files.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod config;
pub mod data;
mod error;
pub mod grad;
pub mod noise;
pub mod optim;
pub mod trainer;

pub use accountant::{
    calibrate_sigma, compose, default_orders, privacy_report, rdp_sampled_gaussian, rdp_to_eps, PrivacyReport,
    PrivacySpec, RdpProfile,
};
pub use config::TrainConfig;
pub use data::{BatchMode, BatchSelector, FeatureDataset};
pub use error::{Error, Result};
pub use grad::{GradientPacket, LinearHead, PrivatizedGradient};
pub use noise::GaussianNoise;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState, Schedule, ScheduleKind};
pub use trainer::{evaluate, init_head, train, Init, MetricsRow, SweepGrid, TrainOutcome};
