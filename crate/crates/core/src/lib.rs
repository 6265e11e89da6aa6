//! Point cloud registration toolkit.
//!
//! The centerpiece is a correspondence-free registration network: a shared
//! set abstraction layer summarizes both clouds, a flow embedding layer
//! compares every template sample with nearby source samples, and a global
//! PointNet with a fully connected head regresses the pose as a dual
//! quaternion. The crate also carries the pieces needed to train and judge
//! it without external frameworks: a reverse-mode differentiation tape,
//! ICP baselines, synthetic data generation, file formats and evaluation
//! metrics.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod icp;
pub mod network;
pub mod spatial;
pub mod tolerance;
pub mod training;

pub use error::{Error, Result};
