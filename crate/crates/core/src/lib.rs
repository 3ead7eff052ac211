//! Deterministic simulator and protocol library for secure hierarchical in-network
//! aggregation with adversary localization and tree reconstruction.

pub mod adversary;
pub mod als;
pub mod atr;
pub mod crypto;
pub mod error;
pub mod net;
pub mod orchestrator;
pub mod report;
pub mod scenario;
pub mod session;
pub mod shia;
pub mod wire;

pub use crypto::{NodeId, Nonce};
pub use error::{Error, Result};
