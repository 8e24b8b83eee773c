//! Deep Taylor decomposition for detection-pooling networks.
//!
//! The crate covers the whole pipeline: dense tensors, MNIST ingestion and
//! paired-digit synthesis, network training, relevance propagation with the
//! root-point rules and the min-max model, comparison baselines, and
//! consistency diagnostics.

pub mod baselines;
pub mod dataio;
pub mod diagnostics;
pub mod network;
pub mod relevance;
pub mod tensor;
