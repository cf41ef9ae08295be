//! Federated neural architecture search with a meta-learned supernet.
//!
//! Clients run first-order MAML over both network weights and
//! Gumbel-Softmax architecture logits, soft-prune dominant choices as they
//! go, and a server averages their results. The crate carries its own
//! small reverse-mode tensor engine.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod meta;
pub mod metrics;
pub mod params;
pub mod prune;
pub mod search;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
