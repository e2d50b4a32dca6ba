//! Federated learning simulator with variance-reduced adaptive server
//! aggregation and quantized client-state tables.

pub mod aggregator;
pub mod client;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod models;
pub mod numvec;
pub mod quant;
pub mod rng;
pub mod server_opt;

pub use error::{FedError, Result};
pub use numvec::{ParamVector, TensorLayout};
