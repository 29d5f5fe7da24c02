//! Federated-learning simulation with CVAE-based activation-map scoring and
//! trust-propagation filtering of client updates.

pub mod attacks;
pub mod cvae;
pub mod data;
pub mod defense;
pub mod error;
pub mod geomed;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod seed;

pub use error::{Error, Result};
