//! Teacher-guided federated semi-supervised segmentation.
//!
//! A small deterministic training stack (tensors, reverse-mode gradients,
//! U-Net style models, low-rank adapters) plus the federation protocol
//! built on top of it: clients train on unlabeled data with pseudo-labels
//! fused from a teacher and their own predictions, and a server aggregates
//! either by parameter averaging (homogeneous models) or by distilling a
//! prediction ensemble on a public set (heterogeneous models).

pub mod agreement;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
