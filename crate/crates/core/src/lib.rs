//! Deterministic single-process federated-learning simulator with
//! Lagrangian group-fairness constraints and server-side gradient-conflict
//! mitigation.

pub mod aggregation;
pub mod baselines;
pub mod client;
pub mod data;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod oracles;

pub use error::{Error, Result};
pub use numeric::{RngState, Vec64};
