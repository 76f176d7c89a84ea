//! Federated fine-tuning simulator and membership inference audit toolkit.
//!
//! A frozen toy backbone feeds trainable adapter/LoRA/projection modules,
//! clients train them with FedSGD, and a server-side adversary scores
//! candidate samples from the uploads it observes.

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod dump;
pub mod error;
pub mod exec;
pub mod federation;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use exec::Execution;
