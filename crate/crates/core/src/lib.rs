//! Pose-normalized feature aggregation for few-shot fine-grained recognition.
//!
//! The crate bundles everything needed to run the experiments at desk scale:
//! dataset handling with part annotations and a synthetic generator
//! ([`data`]), convolutional backbones with an intermediate tap
//! ([`backbone`]), the part-heatmap estimator and its loss ([`pose`]),
//! feature aggregators ([`aggregate`]), few-shot learners with the two-phase
//! heatmap protocol ([`learners`]), and all-way evaluation plus analysis
//! tools ([`evaluate`]).
//!
//! Numeric code is generic over the [`scalar::Scalar`] element type; the
//! aliases below pin the two supported instantiations.

pub mod aggregate;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod learners;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plots;
pub mod pose;
pub mod scalar;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-grade instantiation: fast, the default for the CLI.
pub type Model32 = model::Model<f32>;
/// High-precision instantiation used by oracles and gradient checks.
pub type Model64 = model::Model<f64>;
pub type Bundle32 = data::DatasetBundle<f32>;
pub type Bundle64 = data::DatasetBundle<f64>;
