//! Non-contrastive self-supervised learning for multivariate time series.
//!
//! A Siamese encoder with a predictor head and a stop-gradient on the
//! target branch is pre-trained on unlabelled windows; its feature
//! extractor is then reused for label-efficient user classification.
//! The crate also carries the supervised, augmentation, transfer and
//! multi-task self-supervised baselines, Cohen's kappa evaluation, and the
//! experiment protocols that compare them.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common instantiations.

pub mod analysis;
pub mod augment;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Window32 = augment::Window<f32>;
pub type Window64 = augment::Window<f64>;
pub type SimSiam32 = models::SimSiam<f32>;
pub type SimSiam64 = models::SimSiam<f64>;
pub type Classifier32 = models::Classifier<f32>;
pub type Classifier64 = models::Classifier<f64>;
