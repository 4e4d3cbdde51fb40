//! A convolutional neural-network engine for four-class brain MRI
//! classification: tensors and layers with analytic gradients, the 11-layer
//! network, seeded training, metrics and a command-line interface.

pub mod checksum;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
