//! Simulation and estimation toolkit for algorithmic interview screening
//! under selective labels: applicant generation, penalized logistic models
//! with an exploration bonus, selection policies, the round-by-round
//! learning loop, off-policy evaluation and screener-leniency IV analysis.

pub mod applicant;
pub mod error;
pub mod eval;
pub mod glm;
pub mod iv;
pub mod policy;
pub mod rng;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
