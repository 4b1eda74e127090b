//! Matryoshka sparse autoencoders over frozen embedding vectors.
//!
//! The crate covers the full measurement loop: dataset handling
//! ([`store`]), the nested SAE itself ([`sae`]), optimization
//! ([`trainer`]), feature and configuration metrics ([`metrics`]), linear
//! probes ([`probe`]), fingerprint retrieval ([`retrieval`]) and
//! LLM-assisted feature interpretation ([`interp`]).

pub mod error;
pub mod interp;
pub mod metrics;
pub mod pipeline;
pub mod pool;
pub mod probe;
pub mod retrieval;
pub mod sae;
pub mod store;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
