//! IF-MMIN: invariant-feature missing-modality imagination at desk scale.
//!
//! Two-stage multimodal emotion recognition: Stage 1 pretrains specificity
//! and invariance encoders under a central-moment-discrepancy constraint on
//! full-modality data; Stage 2 trains an imagination module that predicts the
//! missing modality's features from whatever is available, guided by the
//! frozen Stage-1 teacher. Everything runs on a small built-in reverse-mode
//! autodiff engine over dense f64 tensors, with synthetic multimodal data
//! standing in for real extracted features.

pub mod checkpoint;
pub mod cmd;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ifim;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, VarId};
pub use tensor::Tensor;
