//! Core library for domain-aware out-of-distribution detection on a
//! synthetic shapes-on-textures benchmark.
//!
//! The pieces fit together as a pipeline: [`synth`] generates data with
//! exact masks, [`model`] trains a dual-head dense/global network,
//! [`mask`] turns a K-class classifier's attention into (K+1)-class
//! pseudo-labels, [`score`] computes semantic/domain/fused OOD scores,
//! [`metrics`] evaluates them, and [`pipeline`] orchestrates resumable
//! staged runs.

pub mod error;
pub mod imgops;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod score;
pub mod synth;

pub use error::{Error, Result};
