//! Universal image generation at desk scale: tasks are paths in an
//! annotation graph, rendered as grid-layout canvases and solved by a
//! miniature flow-matching infilling transformer.
//!
//! The numerical core is generic over the scalar type ([`scalar::Scalar`]):
//! f32 for training and inference, f64 for finite-difference gradient
//! checks. Concrete aliases for the common instantiations live at the crate
//! root.

pub mod checkpoint;
pub mod error;
pub mod flownet;
pub mod gridlayout;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod prompt;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod synthcorpus;
pub mod taskgraph;
pub mod trainer;

pub use error::{ClozeError, Result};

/// Training/inference precision.
pub type FlowModel = flownet::FlowParams<f32>;
/// Gradient-check precision.
pub type FlowModel64 = flownet::FlowParams<f64>;
pub type LoraAdapter = flownet::lora::LoraAdapter<f32>;
pub type LoraAdapter64 = flownet::lora::LoraAdapter<f64>;
pub type AdamState = checkpoint::AdamState<f32>;
pub type AdamState64 = checkpoint::AdamState<f64>;
