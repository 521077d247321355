//! Core library for exploring sparse autoencoder features by concept.

pub mod api;
pub mod atlas;
pub mod embed;
pub mod error;
pub mod fixtures;
pub mod ingest;
pub mod interpret;
pub mod lab;
pub mod model;
pub mod pack;
pub mod precompute;
pub mod retrieval;
pub mod sae;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
