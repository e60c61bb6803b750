//! Deterministic simulator for federated meta-learning with lottery-ticket
//! sparsification at the server and grow-back personalization at clients.

pub mod error;
pub mod eval;
pub mod federation;
pub mod meta;
pub mod model;
pub mod personalization;
pub mod rng;
pub mod sparsity;
pub mod tasks;
pub mod tensor;
pub mod wire;

pub use error::{FamError, Result};
