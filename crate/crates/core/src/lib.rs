//! Clean pseudo-label selection from zero-shot vision-language model outputs.
//!
//! The pipeline turns multi-view zero-shot probabilities and frozen image
//! features into a small clean pseudo-labeled subset, trains two linear probes
//! with confidence-gated cross supervision, and aggregates patch predictions
//! into slide labels.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the `f32` instantiation used by the interchange format.

pub mod error;
pub mod hcs;
pub mod matrix;
pub mod metrics;
pub mod mvc;
pub mod pfc;
pub mod pipeline;
pub mod runner;
pub mod scalar;
pub mod selection;
pub mod synth;
pub mod tensor_store;
pub mod wsi;
pub mod zeroshot;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;
pub use selection::{LabeledSample, SelectionResult, Stage};

pub type Features = zeroshot::FeatureMatrix<f32>;
pub type Classes = zeroshot::ClassEmbeddings<f32>;
pub type MultiView = mvc::MultiViewPredictions<f32>;
pub type Scores = mvc::MvcScores<f32>;
pub type Clusters = pfc::ClusterAssignment<f32>;
pub type Probe = hcs::LinearProbe<f32>;
pub type Probes = hcs::ProbePair<f32>;
